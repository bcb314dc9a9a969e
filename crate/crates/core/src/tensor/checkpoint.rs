//! Flat binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"MSFLOWCK"
//! u32    version
//! u8     scalar width in bytes (4 or 8), then 3 zero bytes
//! u32    record count
//! record*: u32 name length, UTF-8 name, 4 x u32 shape (n, c, h, w), scalars
//! ```

use std::io::{Read, Write};

use thiserror::Error;

use super::{Scalar, Shape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MSFLOWCK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint holds {found}-byte scalars, expected {expected}")]
    ScalarKind { expected: u8, found: u8 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn write_checkpoint<'a, T, W, I>(mut out: W, records: I) -> Result<(), CheckpointError>
where
    T: Scalar,
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
{
    let records: Vec<_> = records.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&[T::KIND, 0, 0, 0]);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        for d in t.shape().0 {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Corrupt(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<Vec<(String, Tensor<T>)>, CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let kind = cur.take(4)?[0];
    if kind != T::KIND {
        return Err(CheckpointError::ScalarKind {
            expected: T::KIND,
            found: kind,
        });
    }
    let count = cur.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("record name: {e}")))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32()? as usize;
        }
        let shape = Shape(dims);
        let raw = cur.take(shape.len() * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.5f32, -0.0, f32::MIN_POSITIVE]).unwrap();
        let b = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![3.25f32, 1e-30]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("a", &a), ("layer.b", &b)]).unwrap();
        let back: Vec<(String, Tensor<f32>)> = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a");
        assert_eq!(back[1].0, "layer.b");
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(bits(&back[1].1), bits(&b));
    }

    #[test]
    fn rejects_wrong_precision_and_truncation() {
        let a = Tensor::<f64>::ones(Shape::new(1, 1, 2, 2));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("a", &a)]).unwrap();
        assert!(matches!(
            read_checkpoint::<f32, _>(&buf[..]),
            Err(CheckpointError::ScalarKind { .. })
        ));
        assert!(matches!(
            read_checkpoint::<f64, _>(&buf[..buf.len() - 1]),
            Err(CheckpointError::Corrupt(_))
        ));
        assert!(matches!(read_checkpoint::<f64, _>(&b"garbage!"[..]), Err(CheckpointError::BadMagic)));
    }
}
