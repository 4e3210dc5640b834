//! Binary tensor files: "PDTN", version, name, dims, little-endian f32 payload.

use crate::nn::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PDTN";
pub const VERSION: u32 = 1;
/// Guards against absurd headers before any allocation.
const MAX_NDIM: u32 = 16;
const MAX_NAME: u32 = 4096;

#[derive(Debug, thiserror::Error)]
pub enum TensorFileError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("truncated file: {0}")]
    Truncated(&'static str),
    #[error("dimension overflow: {0:?}")]
    DimOverflow(Vec<u32>),
    #[error("header field out of range: {0}")]
    BadHeader(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode_tensor(name: &str, t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + name.len() + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &'static str) -> Result<&'a [u8], TensorFileError> {
    if buf.len() < n {
        return Err(TensorFileError::Truncated(what));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u32(buf: &mut &[u8], what: &'static str) -> Result<u32, TensorFileError> {
    Ok(u32::from_le_bytes(
        take(buf, 4, what)?.try_into().expect("4 bytes"),
    ))
}

pub fn decode_tensor(mut buf: &[u8]) -> Result<(String, Tensor), TensorFileError> {
    let magic: [u8; 4] = take(&mut buf, 4, "magic")?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(TensorFileError::BadMagic(magic));
    }
    let version = take_u32(&mut buf, "version")?;
    if version != VERSION {
        return Err(TensorFileError::Version(version));
    }
    let name_len = take_u32(&mut buf, "name length")?;
    if name_len > MAX_NAME {
        return Err(TensorFileError::BadHeader(format!(
            "name length {name_len}"
        )));
    }
    let name = std::str::from_utf8(take(&mut buf, name_len as usize, "name")?)
        .map_err(|e| TensorFileError::BadHeader(format!("name is not UTF-8: {e}")))?
        .to_string();
    let ndim = take_u32(&mut buf, "ndim")?;
    if ndim > MAX_NDIM {
        return Err(TensorFileError::BadHeader(format!("ndim {ndim}")));
    }
    let dims: Vec<u32> = (0..ndim)
        .map(|_| take_u32(&mut buf, "dims"))
        .collect::<Result<_, _>>()?;
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| TensorFileError::DimOverflow(dims.clone()))?;
    let payload = take(&mut buf, numel * 4, "payload")?;
    if !buf.is_empty() {
        return Err(TensorFileError::TrailingBytes(buf.len()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let shape = dims.iter().map(|&d| d as usize).collect();
    let t = Tensor::new(shape, data).map_err(|e| TensorFileError::BadHeader(e.to_string()))?;
    Ok((name, t))
}

pub fn write_tensor(path: &Path, name: &str, t: &Tensor) -> Result<(), TensorFileError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_tensor(name, t))?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(String, Tensor), TensorFileError> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    decode_tensor(&buf)
}
