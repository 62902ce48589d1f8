//! IDX image archives and binary PGM images.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Contents of an unsigned-byte IDX file.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl IdxArray {
    /// Items along the first dimension, each flattened to values in `[0, 1]`.
    pub fn to_unit_rows(&self) -> Result<Tensor> {
        let n = *self.dims.first().ok_or(Error::EmptyDataset)?;
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let per: usize = self.dims[1..].iter().product();
        let data = self.bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new([n, per], data)
    }
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        format: "idx",
        offset,
        msg: msg.into(),
    }
}

/// Parses `00 00 08 rank`, `rank` big-endian u32 dims, then the raw bytes.
pub fn parse_idx(buf: &[u8]) -> Result<IdxArray> {
    if buf.len() < 4 {
        return Err(fmt_err(buf.len(), "truncated magic"));
    }
    if buf[0] != 0 || buf[1] != 0 {
        return Err(fmt_err(0, "magic must start with two zero bytes"));
    }
    if buf[2] != 0x08 {
        return Err(fmt_err(2, format!("unsupported element type 0x{:02x}", buf[2])));
    }
    let rank = buf[3] as usize;
    if rank == 0 {
        return Err(fmt_err(3, "rank must be at least 1"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 4 + 4 * i;
        let word = buf
            .get(at..at + 4)
            .ok_or_else(|| fmt_err(buf.len(), format!("truncated dimension {i}")))?;
        dims.push(u32::from_be_bytes(word.try_into().expect("4 bytes")) as usize);
    }
    let start = 4 + 4 * rank;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fmt_err(4, "dimension product overflows"))?;
    let have = buf.len() - start;
    if have != count {
        return Err(fmt_err(
            start + have.min(count),
            format!("expected {count} data bytes, found {have}"),
        ));
    }
    Ok(IdxArray {
        dims,
        bytes: buf[start..].to_vec(),
    })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&buf)
}

pub fn encode_idx(dims: &[usize], bytes: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(bytes);
    out
}

/// P5 image with maxval 255; `pixels` are row-major, `width × height`.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::invalid(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(width, height, pixels)?).map_err(|e| Error::io(path, e))
}

/// Maps `[0, 1]` values to bytes, clamping outside the range.
pub fn unit_to_bytes(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Min-max scaled heat map of a matrix, low values dark.
pub fn heatmap_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}
