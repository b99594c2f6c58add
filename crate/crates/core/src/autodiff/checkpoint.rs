//! Binary named-tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "AVFCKPT\0"
//! version    u32      1
//! n_meta     u32
//!   key      u32 length + UTF-8 bytes
//!   value    u32 length + UTF-8 bytes
//! n_tensors  u32
//!   name     u32 length + UTF-8 bytes
//!   flags    u8       bit 0 = trainable
//!   ndim     u32
//!   dims     ndim x u64
//!   payload  prod(dims) x f64
//! ```
//!
//! Tensors appear in store registration order. BLSTM/LSTM gate blocks inside a
//! `w_ih`/`w_hh`/`b` tensor are laid out as `[input, forget, cell, output]`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AVFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<S>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(params: ParamStore<S>) -> Self {
        Self { meta: BTreeMap::new(), params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        let entries = self.params.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in entries {
            put_str(&mut out, &e.name);
            out.push(u8::from(e.trainable));
            out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in e.value.data() {
                out.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], seed: u64) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let mut params = ParamStore::new(seed);
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let flags = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let overflow = || Error::Format(format!("extents of `{name}` overflow"));
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(overflow)?;
            let payload = r.take(n.checked_mul(8).ok_or_else(overflow)?)?;
            let data = payload.chunks_exact(8).map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect();
            if params.contains(&name) {
                return Err(Error::Format(format!("duplicate parameter `{name}`")));
            }
            params.insert(&name, Tensor::new(shape, data)?, flags & 1 == 1);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf, 0)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.pos {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::Init;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::<f64>::new(5);
        store.get_or_init("encoder.audio.w", &[3, 4], Init::Xavier).unwrap();
        store.get_or_init("encoder.audio.b", &[4], Init::Zeros).unwrap();
        store.insert_buffer("encoder.audio.stats.mean", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        let mut ck = Checkpoint::new(store);
        ck.meta.insert("phase".into(), "ao".into());
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f64>::from_bytes(&bytes, 0).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta["phase"], "ao");
        let m = back.params.get("encoder.audio.stats.mean").unwrap();
        assert_eq!(m.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::<f64>::from_bytes(b"nonsense", 0).is_err());
        let ck = Checkpoint::new(ParamStore::<f64>::new(0));
        let mut bytes = ck.to_bytes();
        bytes.push(0);
        assert!(Checkpoint::<f64>::from_bytes(&bytes, 0).is_err());
    }
}
