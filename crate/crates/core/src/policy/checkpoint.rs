//! Binary checkpoint format (all integers `u32` little-endian):
//!
//! ```text
//! magic        8 bytes   b"EADPOLCY"
//! version      u32       1
//! vocab        u32
//! embed        u32
//! hidden       u32
//! n_tensors    u32       6
//! per tensor, in order embed, w_in, w_rec, bias, w_out, b_out:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   ndim       u32
//!   dims       ndim x u32
//!   data       prod(dims) x f64 little-endian, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Dims, PolicyError, PolicyParams, TENSOR_NAMES};

pub const MAGIC: &[u8; 8] = b"EADPOLCY";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &PolicyParams) -> Vec<u8> {
    let dims = params.dims();
    let mut out = Vec::with_capacity(64 + params.num_params() * 8);
    out.extend_from_slice(MAGIC);
    for x in [
        FORMAT_VERSION,
        dims.vocab as u32,
        dims.embed as u32,
        dims.hidden as u32,
        TENSOR_NAMES.len() as u32,
    ] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for (name, shape, data) in params.tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyError> {
        if self.buf.len() < n {
            return Err(PolicyError::Checkpoint("unexpected end of file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, PolicyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, PolicyError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<PolicyParams, PolicyError> {
    let mut r = Reader { buf: bytes };
    if r.take(8)? != MAGIC {
        return Err(PolicyError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(PolicyError::Checkpoint(format!("unsupported format version {version}")));
    }
    let dims = Dims::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let count = r.u32()? as usize;
    if count != TENSOR_NAMES.len() {
        return Err(PolicyError::Checkpoint(format!("expected 6 tensors, found {count}")));
    }
    let mut params = PolicyParams::zeros(dims);
    for (expected_name, expected_shape, data) in params.tensors_mut() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| PolicyError::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(PolicyError::Checkpoint(format!(
                "expected tensor `{expected_name}`, found `{name}`"
            )));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if shape != expected_shape {
            return Err(PolicyError::ShapeMismatch(format!(
                "`{name}` declared {shape:?}, dims imply {expected_shape:?}"
            )));
        }
        for x in data.iter_mut() {
            *x = r.f64()?;
        }
    }
    if !r.buf.is_empty() {
        return Err(PolicyError::Checkpoint(format!("{} trailing bytes", r.buf.len())));
    }
    Ok(params)
}

pub fn save(params: &PolicyParams, path: &Path) -> Result<(), PolicyError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolicyParams, PolicyError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
