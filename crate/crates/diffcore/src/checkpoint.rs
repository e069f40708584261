//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GMIC"                       magic
//! u32                          format version (1)
//! u32                          tensor count
//! per tensor:
//!   u32 name length, UTF-8 name bytes
//!   u32 rank, u32 x rank dims
//!   f32 x numel values
//! u8                           optimizer flag (0 = absent, 1 = present)
//! if present, per tensor in the same order:
//!   u8 has-moments flag; if 1: u64 step, f32 x numel first moment, f32 x numel second moment
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::params::{AdamMoments, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GMIC";
pub const VERSION: u32 = 1;

/// Contents of a checkpoint file, independent of any model layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub adam: Option<Vec<Option<AdamMoments<f32>>>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_f32s<W: Write>(w: &mut W, vals: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = vals.flat_map(f32::to_le_bytes).collect();
    w.write_all(&bytes)?;
    Ok(())
}

impl Checkpoint {
    pub fn from_store<T: Real>(store: &ParamStore<T>, with_adam: bool) -> Self {
        let tensors = store
            .ids()
            .map(|id| (store.name(id).to_owned(), store.value(id).cast::<f32>()))
            .collect();
        let adam = with_adam.then(|| {
            store
                .ids()
                .map(|id| {
                    store.adam(id).map(|a| AdamMoments {
                        step: a.step,
                        m: a.m.iter().map(|v| v.as_f64() as f32).collect(),
                        v: a.v.iter().map(|v| v.as_f64() as f32).collect(),
                    })
                })
                .collect()
        });
        Self { tensors, adam }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            write_f32s(&mut w, t.data().iter().copied())?;
        }
        match &self.adam {
            None => w.write_all(&[0])?,
            Some(states) => {
                w.write_all(&[1])?;
                for state in states {
                    match state {
                        None => w.write_all(&[0])?,
                        Some(a) => {
                            w.write_all(&[1])?;
                            w.write_all(&a.step.to_le_bytes())?;
                            write_f32s(&mut w, a.m.iter().copied())?;
                            write_f32s(&mut w, a.v.iter().copied())?;
                        }
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            let dims = (0..rank)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().product();
            let data = read_f32s(&mut r, numel)?;
            let t = Tensor::new(dims, data).map_err(|e| bad(format!("`{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let mut flag = [0u8];
        r.read_exact(&mut flag)?;
        let adam = match flag[0] {
            0 => None,
            1 => {
                let mut states = Vec::with_capacity(count);
                for (_, t) in &tensors {
                    r.read_exact(&mut flag)?;
                    states.push(match flag[0] {
                        0 => None,
                        1 => {
                            let mut step = [0u8; 8];
                            r.read_exact(&mut step)?;
                            Some(AdamMoments {
                                step: u64::from_le_bytes(step),
                                m: read_f32s(&mut r, t.numel())?,
                                v: read_f32s(&mut r, t.numel())?,
                            })
                        }
                        f => return Err(bad(format!("bad moment flag {f}"))),
                    });
                }
                Some(states)
            }
            f => return Err(bad(format!("bad optimizer flag {f}"))),
        };
        Ok(Self { tensors, adam })
    }

    /// Copies every tensor into `store` by name; names and shapes must match exactly.
    pub fn restore_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(bad(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            let id = store.id(name)?;
            store
                .set(id, t.cast())
                .map_err(|e| bad(format!("`{name}`: {e}")))?;
            let moments = self.adam.as_ref().and_then(|a| a[i].as_ref()).map(|a| AdamMoments {
                step: a.step,
                m: a.m.iter().map(|&v| T::from_f64(v as f64)).collect(),
                v: a.v.iter().map(|&v| T::from_f64(v as f64)).collect(),
            });
            store.set_adam(id, moments);
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
