use std::fs;
use std::path::Path;

use super::{io_error, DataError};
use crate::tensor::{Shape, Tensor};

/// Header tag of a `.flo` file, stored as a little-endian `f32` ("PIEH").
pub const FLO_MAGIC: f32 = 202021.25;

/// Components above this magnitude mark a pixel with unknown flow.
pub const UNKNOWN_FLOW_THRESHOLD: f32 = 1e9;

const HEADER: usize = 12;

/// Serializes a `(1, 2, H, W)` flow: magic, width, height, then interleaved
/// `(u, v)` pairs in row-major order, all little-endian.
pub fn encode_flo(flow: &Tensor<f32>) -> Result<Vec<u8>, DataError> {
    let s = flow.shape();
    if s.n() != 1 || s.c() != 2 {
        return Err(DataError::Sample(format!("flow must be 1x2xHxW, got {s}")));
    }
    if !flow.is_finite() {
        return Err(DataError::Sample("cannot write non-finite flow".into()));
    }
    let mut out = Vec::with_capacity(HEADER + 8 * s.plane());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(s.w() as i32).to_le_bytes());
    out.extend_from_slice(&(s.h() as i32).to_le_bytes());
    for y in 0..s.h() {
        for x in 0..s.w() {
            out.extend_from_slice(&flow.at(0, 0, y, x).to_le_bytes());
            out.extend_from_slice(&flow.at(0, 1, y, x).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses `.flo` bytes; `path` only labels errors.
pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<Tensor<f32>, DataError> {
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().expect("4-byte slice") };
    if bytes.len() < 4 || f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(DataError::NotFlowFile(path.to_path_buf()));
    }
    if bytes.len() < HEADER {
        return Err(DataError::CorruptFlow {
            path: path.to_path_buf(),
            expected: HEADER as u64,
            actual: bytes.len() as u64,
        });
    }
    let (w, h) = (i32::from_le_bytes(word(4)), i32::from_le_bytes(word(8)));
    if w <= 0 || h <= 0 {
        return Err(DataError::CorruptFlow {
            path: path.to_path_buf(),
            expected: HEADER as u64 + 8,
            actual: bytes.len() as u64,
        });
    }
    let (w, h) = (w as usize, h as usize);
    let expected = HEADER as u64 + 8 * (w as u64) * (h as u64);
    if bytes.len() as u64 != expected {
        return Err(DataError::CorruptFlow {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut flow = Tensor::zeros(Shape::new(1, 2, h, w));
    for y in 0..h {
        for x in 0..w {
            let i = HEADER + 8 * (y * w + x);
            flow.set(0, 0, y, x, f32::from_le_bytes(word(i)));
            flow.set(0, 1, y, x, f32::from_le_bytes(word(i + 4)));
        }
    }
    Ok(flow)
}

pub fn write_flo(path: &Path, flow: &Tensor<f32>) -> Result<(), DataError> {
    fs::write(path, encode_flo(flow)?).map_err(io_error(path))
}

pub fn read_flo(path: &Path) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path).map_err(io_error(path))?;
    decode_flo(&bytes, path)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_flow(h: usize, w: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Tensor::uniform(Shape::new(1, 2, h, w), -50.0, 50.0, &mut rng)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.flo");
        let flow = random_flow(16, 16);
        write_flo(&path, &flow).unwrap();
        let back = read_flo(&path).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&flow));
    }

    #[test]
    fn header_layout() {
        let bytes = encode_flo(&random_flow(16, 16)).unwrap();
        assert_eq!(&bytes[..4], &202021.25f32.to_le_bytes());
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(&bytes[4..12], &[0x10, 0, 0, 0, 0x10, 0, 0, 0]);
        assert_eq!(bytes.len(), 12 + 16 * 16 * 8);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("x.flo");
        let mut bytes = encode_flo(&random_flow(4, 5)).unwrap();
        let err = decode_flo(&bytes[..bytes.len() - 3], p).unwrap_err();
        assert!(matches!(err, DataError::CorruptFlow { expected: 172, actual: 169, .. }), "{err}");
        assert!(err.to_string().contains("corrupt flow file"));
        bytes[..4].copy_from_slice(&0f32.to_le_bytes());
        let err = decode_flo(&bytes, p).unwrap_err();
        assert!(err.to_string().contains("not a flow file"));
        assert!(decode_flo(&[], p).is_err());
    }

    #[test]
    fn refuses_non_finite_flow() {
        let mut flow = random_flow(2, 2);
        flow.set(0, 1, 1, 1, f32::NAN);
        assert!(encode_flo(&flow).is_err());
    }
}
