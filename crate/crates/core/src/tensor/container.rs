//! `LSNT` tensor container.
//!
//! Layout (all integers little-endian):
//! `"LSNT"`, version `u32`, tensor count `u32`, then per tensor: name length
//! `u16`, UTF-8 name, ndim `u8` (always 4), four `u32` dims, and the values as
//! 32-bit floats in row-major order.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CONTAINER_MAGIC: &[u8; 4] = b"LSNT";
pub const CONTAINER_VERSION: u32 = 1;

pub fn encode_container<'a, T: Scalar>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let name = name.as_bytes();
        let len = u16::try_from(name.len()).expect("tensor name longer than 65535 bytes");
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(4);
        for d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            let v = v.to_f32().expect("float scalar");
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                format: "LSNT container",
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            format: "LSNT container",
            offset,
            msg: msg.into(),
        }
    }
}

/// Decodes a container. Returns the named tensors and the number of bytes
/// consumed; anything after that offset is left to the caller.
pub fn decode_container(bytes: &[u8]) -> Result<(Vec<(String, Tensor<f32>)>, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CONTAINER_MAGIC {
        return Err(r.fail(0, format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.u32("version")?;
    if version != CONTAINER_VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let name_at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.fail(name_at + 2, "name is not UTF-8"))?
            .to_string();
        let ndim_at = r.pos;
        let ndim = r.take(1, "ndim")?[0];
        if ndim != 4 {
            return Err(r.fail(ndim_at, format!("ndim must be 4, got {ndim}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("dims")? as usize;
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| r.fail(ndim_at, "dims overflow"))?, "data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(dims, data)?));
    }
    Ok((out, r.pos))
}
