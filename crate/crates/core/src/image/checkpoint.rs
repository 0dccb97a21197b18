//! Binary checkpoint format.
//!
//! ```text
//! "GMCK" | version u32 | input c1 c2 c3 embed (u32 each) | tensor count u32
//! then per tensor: value count u32, values as little-endian f32
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::net::{Arch, ConvRegressor, Params, Scalar, TENSOR_NAMES};

const MAGIC: &[u8; 4] = b"GMCK";
const VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(model: &ConvRegressor<T>) -> Vec<u8> {
    let a = model.arch;
    let mut out = Vec::with_capacity(64 + 4 * model.params.len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, a.input as u32, a.c1 as u32, a.c2 as u32, a.c3 as u32, a.embed as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let tensors = model.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for v in t {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ConvRegressor<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let dims: Vec<usize> = (0..5).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let arch = Arch { input: dims[0], c1: dims[1], c2: dims[2], c3: dims[3], embed: dims[4] };
    arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = r.u32()? as usize;
    if count != TENSOR_NAMES.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", TENSOR_NAMES.len())));
    }
    let mut params = Params::<T>::zeros(&arch);
    for (i, t) in params.tensors_mut().into_iter().enumerate() {
        let n = r.u32()? as usize;
        if n != t.len() {
            return Err(Error::Checkpoint(format!(
                "{} holds {n} values, architecture needs {}",
                TENSOR_NAMES[i],
                t.len()
            )));
        }
        for v in t.iter_mut() {
            let x = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::Checkpoint(format!("non-finite value in {}", TENSOR_NAMES[i])));
            }
            *v = T::from_f64(x as f64);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ConvRegressor::with_params(arch, params)
}

pub fn save<T: Scalar>(model: &ConvRegressor<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<ConvRegressor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
