//! Parameter checkpoint file.
//!
//! Layout (little-endian): `AMCK`, u32 version, u32 parameter count, then for
//! each parameter: u16 name length, UTF-8 name, u8 ndim, ndim × u32 dims,
//! row-major f64 data, u8 moment flag, and when the flag is 1 the first and
//! second moments in the same layout as the data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::param::ParamStore;
use crate::numcore::tensor::{numel, shape_str, Tensor};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub moments: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, with_moments: bool) -> Self {
        let to64 = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>();
        let entries = store
            .iter()
            .map(|(_, p)| CheckpointEntry {
                name: p.name.clone(),
                shape: p.shape().to_vec(),
                data: to64(p.tensor.data()),
                moments: with_moments
                    .then(|| (to64(&p.first_moment), to64(&p.second_moment))),
            })
            .collect();
        Checkpoint { entries }
    }

    /// Copies values (and moments when present) into a store with matching names and shapes.
    pub fn apply_to<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} parameters, model has {}",
                self.entries.len(),
                store.len()
            )));
        }
        for e in &self.entries {
            let id = store.id_of(&e.name).ok_or_else(|| {
                Error::Shape(format!("checkpoint parameter `{}` unknown to model", e.name))
            })?;
            let p = store.get_mut(id);
            if p.shape() != e.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter `{}`: checkpoint shape {} vs model {}",
                    e.name,
                    shape_str(&e.shape),
                    shape_str(p.shape())
                )));
            }
            let conv = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
            p.tensor = Tensor::new(e.shape.clone(), conv(&e.data))?.with_requires_grad(true);
            match &e.moments {
                Some((m, v)) => {
                    p.first_moment = conv(m);
                    p.second_moment = conv(v);
                }
                None => {
                    p.first_moment.iter_mut().for_each(|x| *x = T::zero());
                    p.second_moment.iter_mut().for_each(|x| *x = T::zero());
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let put = |out: &mut Vec<u8>, v: &[f64]| {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put(&mut out, &e.data);
            match &e.moments {
                Some((m, v)) => {
                    out.push(1);
                    put(&mut out, m);
                    put(&mut out, v);
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(origin, "parameter name is not UTF-8"))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = numel(&shape);
            let data = r.f64s(n)?;
            let moments = match r.take(1)?[0] {
                0 => None,
                1 => Some((r.f64s(n)?, r.f64s(n)?)),
                f => {
                    return Err(Error::format(origin, format!("bad moment flag {f}")));
                }
            };
            entries.push(CheckpointEntry {
                name,
                shape,
                data,
                moments,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after last parameter"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
