//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LPCCKPT1"                       8-byte magic
//! u32 entry_count
//! entry_count × {
//!     u32 name_len, name (UTF-8)
//!     u32 rank, rank × u64 extent
//!     u64 offset                   byte offset into the data block
//! }
//! data block                       f64 values, entries back to back
//! ```

use std::path::Path;

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LPCCKPT1";

pub fn encode(tensors: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in tensors.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.len() as u64;
    }
    for (_, t) in tensors.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                format: "checkpoint",
                offset: self.pos,
                msg: format!("truncated: need {n} bytes"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamSet> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format {
            format: "checkpoint",
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let count = c.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let at = c.pos;
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| Error::Format {
                format: "checkpoint",
                offset: at,
                msg: e.to_string(),
            })?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = c.u64()? as usize;
        manifest.push((name, shape, offset));
    }
    let data_start = c.pos;
    let mut out = ParamSet::new();
    for (name, shape, offset) in manifest {
        let n: usize = shape.iter().product();
        let start = data_start + offset;
        let end = start + 8 * n;
        if end > buf.len() {
            return Err(Error::Format {
                format: "checkpoint",
                offset: start,
                msg: format!("data for `{name}` runs past end of file"),
            });
        }
        let data = buf[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &ParamSet) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([1, 2], vec![1.5, -2.0]).unwrap())
            .unwrap();
        let bytes = encode(&p);
        assert_eq!(&bytes[..8], b"LPCCKPT1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        // name_len(4) + "w"(1) + rank(4) + 2 dims(16) + offset(8)
        let data = 12 + 4 + 1 + 4 + 16 + 8;
        assert_eq!(bytes.len(), data + 16);
        assert_eq!(f64::from_le_bytes(bytes[data..data + 8].try_into().unwrap()), 1.5);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0; 4])).unwrap();
        let bytes = encode(&p);
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(decode(b"NOTACKPT").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in prop::collection::vec(prop::num::f64::ANY, 1..40),
            split in 0usize..40,
        ) {
            let split = split.min(values.len());
            let mut p = ParamSet::new();
            p.insert("a.weight", Tensor::vector(values[..split].to_vec())).unwrap();
            p.insert("b", Tensor::new([values.len() - split, 1], values[split..].to_vec()).unwrap()).unwrap();
            p.insert("scalar", Tensor::scalar(values[0])).unwrap();
            let back = decode(&encode(&p)).unwrap();
            let bits = |s: &ParamSet| s.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&p), bits(&back));
            prop_assert_eq!(p.names().collect::<Vec<_>>(), back.names().collect::<Vec<_>>());
        }
    }
}
