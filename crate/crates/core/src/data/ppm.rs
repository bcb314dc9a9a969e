use std::fs;
use std::path::Path;

use super::{io_error, DataError};
use crate::tensor::{Shape, Tensor};

/// Encodes a `(1, 3, H, W)` image in `[0, 1]` as binary 8-bit PPM (P6).
/// Values are rounded to the nearest of the 256 levels.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>, DataError> {
    let s = image.shape();
    if s.n() != 1 || s.c() != 3 {
        return Err(DataError::Sample(format!("image must be 1x3xHxW, got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w(), s.h()).into_bytes();
    out.reserve(3 * s.plane());
    for y in 0..s.h() {
        for x in 0..s.w() {
            for c in 0..3 {
                let v = image.at(0, c, y, x);
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Header<'_> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T, DataError> {
        Err(DataError::BadImage {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    /// Returns the value and its byte offset.
    fn number(&mut self, what: &str) -> Result<(usize, usize), DataError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse() {
            Ok(v) if v > 0 => Ok((v, start)),
            _ => {
                self.pos = start;
                self.fail(format!("invalid {what} `{text}`"))
            }
        }
    }
}

/// Parses a binary PPM with maxval 255; `path` only labels errors. Sample
/// values map to `byte / 255`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>, DataError> {
    let mut hd = Header { bytes, pos: 0, path };
    if !bytes.starts_with(b"P6") {
        return hd.fail("missing P6 magic");
    }
    hd.pos = 2;
    let (w, _) = hd.number("width")?;
    let (h, _) = hd.number("height")?;
    let (maxval, at) = hd.number("maxval")?;
    if maxval != 255 {
        hd.pos = at;
        return hd.fail(format!("only maxval 255 is supported, got {maxval}"));
    }
    if !bytes.get(hd.pos).is_some_and(u8::is_ascii_whitespace) {
        return hd.fail("expected a single whitespace byte before the raster");
    }
    hd.pos += 1;
    let raster = &bytes[hd.pos..];
    if raster.len() != 3 * w * h {
        return hd.fail(format!("raster has {} bytes, expected {}", raster.len(), 3 * w * h));
    }
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        raster[3 * (y * w + x) + c] as f32 / 255.0
    }))
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<(), DataError> {
    fs::write(path, encode_ppm(image)?).map_err(io_error(path))
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path).map_err(io_error(path))?;
    decode_ppm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn byte_round_trip_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bytes = b"P6\n7 5\n255\n".to_vec();
        bytes.extend((0..3 * 7 * 5).map(|_| rng.random::<u8>()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        fs::write(&path, &bytes).unwrap();
        let img = read_image(&path).unwrap();
        let out = dir.path().join("b.ppm");
        write_image(&out, &img).unwrap();
        assert_eq!(fs::read(&out).unwrap(), bytes);
    }

    #[test]
    fn parses_minimal_header_and_scales_by_255() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 255]);
        let img = decode_ppm(&bytes, Path::new("t.ppm")).unwrap();
        assert_eq!(img.shape(), Shape::new(1, 3, 2, 2));
        assert_eq!(img.at(0, 0, 0, 0), 0.0);
        assert_eq!(img.at(0, 1, 0, 0), 1.0 / 255.0);
        assert_eq!(img.at(0, 2, 1, 1), 1.0);
        assert_eq!(img.at(0, 0, 1, 0), 6.0 / 255.0);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6 # made by hand\n1 1 # one pixel\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7]);
        assert_eq!(decode_ppm(&bytes, Path::new("c.ppm")).unwrap().at(0, 2, 0, 0), 7.0 / 255.0);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let p = Path::new("m.ppm");
        let cases: [(&[u8], usize); 4] = [
            (b"P5\n1 1\n255\n\0", 0),
            (b"P6\nx 1\n255\n", 3),
            (b"P6\n1 1\n65535\n\0\0\0\0\0\0", 7),
            (b"P6\n1 1\n255\n\0\0", 11),
        ];
        for (bytes, offset) in cases {
            match decode_ppm(bytes, p) {
                Err(DataError::BadImage { offset: o, .. }) => assert_eq!(o, offset, "{:?}", String::from_utf8_lossy(bytes)),
                other => panic!("expected rejection, got {other:?}"),
            }
        }
    }
}
