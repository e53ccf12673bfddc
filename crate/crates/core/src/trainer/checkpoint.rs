//! Versioned binary checkpoints.
//!
//! Layout, all integers and scalars little-endian:
//!
//! ```text
//! magic      8 bytes  "GEDTCKPT"
//! version    u32
//! count      u32
//! count x    name_len u32, name utf-8, rank u32, dims u64 x rank, f64 x prod(dims)
//! t          u64      optimizer step
//! count x    m, v, slow: f64 x len each
//! step       u64
//! config     u32 length, utf-8 text
//! digest     32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::OptimState;
use crate::error::{Error, Result};
use crate::mapper::{init_params, MapperConfig, ParamStore};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"GEDTCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub params: ParamStore<f64>,
    pub optim: OptimState,
    pub step: u64,
    /// Training config in its canonical text form.
    pub config: String,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt("array too large"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl CheckpointBundle {
    pub fn new<T: Scalar>(params: &ParamStore<T>, optim: OptimState, step: u64, config: String) -> Self {
        let mut wide = ParamStore::new();
        for (name, v) in params.iter() {
            let t = Tensor::new(v.shape(), v.data().iter().map(|x| x.to_f64_lossy()).collect()).expect("same shape");
            wide.insert(name, t).expect("names are unique");
        }
        Self {
            params: wide,
            optim,
            step,
            config,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, v) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(v.rank() as u32).to_le_bytes());
            for d in v.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            put_f64s(&mut out, v.data());
        }
        out.extend_from_slice(&self.optim.t.to_le_bytes());
        for i in 0..self.params.len() {
            put_f64s(&mut out, &self.optim.m[i]);
            put_f64s(&mut out, &self.optim.v[i]);
            put_f64s(&mut out, &self.optim.slow[i]);
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("missing magic tag"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("content digest does not match"));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("parameter name is not utf-8"))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape overflows"))?;
            let data = r.f64s(n)?;
            let t = Tensor::new(&dims, data).map_err(|e| corrupt(e.to_string()))?;
            params.insert(name, t).map_err(|e| corrupt(e.to_string()))?;
        }
        let t = r.u64()?;
        let (mut m, mut v, mut slow) = (Vec::new(), Vec::new(), Vec::new());
        for p in params.values() {
            m.push(r.f64s(p.len())?);
            v.push(r.f64s(p.len())?);
            slow.push(r.f64s(p.len())?);
        }
        let step = r.u64()?;
        let len = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(len)?)
            .map_err(|_| corrupt("config is not utf-8"))?
            .to_string();
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            params,
            optim: OptimState { t, m, v, slow },
            step,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized bundle.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Parameters checked against the architecture `cfg` and cast to `T`.
    pub fn params_for<T: Scalar>(&self, cfg: &MapperConfig) -> Result<ParamStore<T>> {
        let mut template = init_params::<T>(cfg, 0)?;
        let mut values = Vec::with_capacity(template.len());
        for (name, want) in template.iter() {
            let got = self.params.get(name).map_err(|_| Error::ShapeMismatch {
                name: name.to_string(),
                expected: want.shape().to_vec(),
                got: vec![],
            })?;
            if got.shape() != want.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: want.shape().to_vec(),
                    got: got.shape().to_vec(),
                });
            }
            values.push(Tensor::new(got.shape(), got.data().iter().map(|&x| T::of(x)).collect())?);
        }
        if let Some(extra) = self.params.names().iter().find(|n| template.get(n).is_err()) {
            return Err(Error::ShapeMismatch {
                name: extra.clone(),
                expected: vec![],
                got: self.params.get(extra)?.shape().to_vec(),
            });
        }
        template.set_values(values)?;
        Ok(template)
    }
}
