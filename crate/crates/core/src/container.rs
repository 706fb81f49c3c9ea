//! `CPXA` binary container for complex arrays.
//!
//! Layout (little-endian):
//!
//! | bytes          | content                                   |
//! |----------------|-------------------------------------------|
//! | 0..4           | magic `CPXA`                              |
//! | 4              | version, currently 1                      |
//! | 5              | `ndim`, 1 to 4                            |
//! | 6..6+8*ndim    | dimensions as `u64`                       |
//! | rest           | row-major `(re, im)` pairs as IEEE `f32`  |

use std::fs;
use std::path::Path;

use num_complex::Complex;

use crate::array::ComplexArray;
use crate::error::{Error, Result};
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"CPXA";
pub const VERSION: u8 = 1;
pub const MAX_NDIM: usize = 4;

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, reason: reason.into() }
}

pub fn encode<T: Scalar>(a: &ComplexArray<T>) -> Result<Vec<u8>> {
    let ndim = a.ndim();
    if !(1..=MAX_NDIM).contains(&ndim) {
        return Err(Error::InvalidArgument(format!("CPXA supports 1 to 4 dimensions, got {ndim}")));
    }
    let mut out = Vec::with_capacity(6 + 8 * ndim + 8 * a.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(ndim as u8);
    for &d in a.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for c in a.data() {
        out.extend_from_slice(&(c.re.as_f64() as f32).to_le_bytes());
        out.extend_from_slice(&(c.im.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ComplexArray<f32>> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected CPXA"));
    }
    let version = *bytes.get(4).ok_or_else(|| format_err(4, "truncated version"))?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let ndim = *bytes.get(5).ok_or_else(|| format_err(5, "truncated ndim"))? as usize;
    if !(1..=MAX_NDIM).contains(&ndim) {
        return Err(format_err(5, format!("ndim {ndim} outside 1..=4")));
    }
    let mut pos = 6;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let raw = bytes.get(pos..pos + 8).ok_or_else(|| format_err(bytes.len(), "truncated dimensions"))?;
        let d = u64::from_le_bytes(raw.try_into().expect("8 bytes"));
        if d == 0 {
            return Err(format_err(pos, "zero-length dimension"));
        }
        shape.push(usize::try_from(d).map_err(|_| format_err(pos, "dimension overflows usize"))?);
        pos += 8;
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| format_err(6, "element count overflows"))?;
    let payload = &bytes[pos..];
    if payload.len() < count {
        return Err(format_err(bytes.len(), format!("truncated data, expected {count} payload bytes")));
    }
    if payload.len() > count {
        return Err(format_err(pos + count, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(8)
        .map(|p| {
            let re = f32::from_le_bytes(p[..4].try_into().expect("4 bytes"));
            let im = f32::from_le_bytes(p[4..].try_into().expect("4 bytes"));
            Complex::new(re, im)
        })
        .collect();
    ComplexArray::from_vec(&shape, data)
}

pub fn save_array<T: Scalar>(path: impl AsRef<Path>, a: &ComplexArray<T>) -> Result<()> {
    fs::write(path, encode(a)?)?;
    Ok(())
}

pub fn load_array(path: impl AsRef<Path>) -> Result<ComplexArray<f32>> {
    decode(&fs::read(path)?)
}

/// Real-valued tensor stored with zero imaginary part.
pub fn save_real<T: Scalar>(path: impl AsRef<Path>, shape: &[usize], values: &[T]) -> Result<()> {
    save_array(path, &ComplexArray::from_real(shape, values)?)
}

pub fn load_real<T: Scalar>(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<T>)> {
    let a = load_array(path)?;
    let values = a.data().iter().map(|c| T::of(c.re as f64)).collect();
    Ok((a.shape().to_vec(), values))
}
