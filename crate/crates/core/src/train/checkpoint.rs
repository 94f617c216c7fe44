//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | field        | type                       |
//! |--------------|----------------------------|
//! | magic        | `b"PTCH"`                  |
//! | version      | `u32`, currently 1         |
//! | config hash  | `u32`                      |
//! | tensor count | `u32`                      |
//! | per tensor   | `u16` name length, UTF-8 name, `u8` ndim, `u32` dims, `f32` data |
//!
//! Model parameters come first in name order, followed by the optimiser
//! state under `opt.` names.

use std::collections::BTreeSet;
use std::path::Path;

use super::optim::{OptimConfig, Optimizer};
use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tensor};

pub const MAGIC: &[u8; 4] = b"PTCH";
pub const VERSION: u32 = 1;

const STEP: &str = "opt.step";
const BEST: &str = "opt.best_val_dsc";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u32,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParameterStore<f32>,
    pub optimizer: Optimizer,
    /// Steps taken so far.
    pub step: usize,
    /// Best validation DSC seen so far, or negative if none.
    pub best_val_dsc: f64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            let ndim = u8::try_from(t.ndim())
                .map_err(|_| Error::Checkpoint(format!("{name} has too many axes")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(ndim);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Checkpoint(format!("{name} axis too long")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash = r.u32("config hash")?;
        let count = r.u32("tensor count")? as usize;
        let mut seen = BTreeSet::new();
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = u16::from_le_bytes(r.array("name length")?) as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let ndim = r.take(1, "ndim")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: data runs past end of file")))?;
            let raw = r.take(numel * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { config_hash, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parameters only, no optimiser state.
    pub fn from_params(config_hash: u32, params: &ParameterStore<f32>) -> Self {
        let tensors = params
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::new(t.shape(), t.data().to_vec()).expect("same shape")))
            .collect();
        Checkpoint { config_hash, tensors }
    }

    pub fn from_state(config_hash: u32, state: &TrainState) -> Self {
        let mut ck = Checkpoint::from_params(config_hash, &state.params);
        let opt = &state.optimizer;
        ck.tensors.push((STEP.into(), Tensor::full(&[1], state.step as f32)));
        ck.tensors.push((BEST.into(), Tensor::full(&[1], state.best_val_dsc as f32)));
        for (prefix, buffers) in [("opt.m.", &opt.m), ("opt.v.", &opt.v)] {
            for (name, p) in state.params.iter() {
                let data = buffers.get(name).cloned().unwrap_or_else(|| vec![0.0; p.numel()]);
                let t = Tensor::new(p.shape(), data).expect("moment matches parameter");
                ck.tensors.push((format!("{prefix}{name}"), t));
            }
        }
        ck
    }

    /// Checks every tensor against `template` (names and shapes, in order)
    /// and then the config hash, and returns the model parameters.
    pub fn params(&self, config_hash: u32, template: &ParameterStore<f32>) -> Result<ParameterStore<f32>> {
        let model: Vec<_> = self.tensors.iter().filter(|(n, _)| !n.starts_with("opt.")).collect();
        let mut expected = template.iter();
        for (name, t) in &model {
            match expected.next() {
                Some((en, et)) if en == name && et.shape() == t.shape() => {}
                Some((en, et)) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor mismatch: file has {name} {:?}, model expects {en} {:?}",
                        t.shape(),
                        et.shape()
                    )))
                }
                None => {
                    return Err(Error::Checkpoint(format!("tensor mismatch: unexpected tensor {name}")))
                }
            }
        }
        if let Some((en, _)) = expected.next() {
            return Err(Error::Checkpoint(format!("tensor mismatch: missing tensor {en}")));
        }
        if self.config_hash != config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash {:08x} does not match the config ({config_hash:08x})",
                self.config_hash
            )));
        }
        let mut store = ParameterStore::new();
        for ((name, t), (_, et)) in model.into_iter().zip(template.iter()) {
            store.insert(name.clone(), t.clone().with_requires_grad(et.requires_grad))?;
        }
        Ok(store)
    }

    /// Full training state; see [`Checkpoint::params`] for the checks.
    pub fn state(&self, config_hash: u32, template: &ParameterStore<f32>, optim: OptimConfig) -> Result<TrainState> {
        let params = self.params(config_hash, template)?;
        let get = |name: &str| -> Result<&Tensor<f32>> {
            self.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimiser tensor {name}")))
        };
        let step = get(STEP)?.data()[0];
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::Checkpoint(format!("invalid step count {step}")));
        }
        let best_val_dsc = get(BEST)?.data()[0] as f64;
        let mut optimizer = Optimizer::new(optim, &params);
        optimizer.step = step as u64;
        for (name, p) in params.iter() {
            for (prefix, buf) in [("opt.m.", &mut optimizer.m), ("opt.v.", &mut optimizer.v)] {
                let t = get(&format!("{prefix}{name}"))?;
                if t.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!("{prefix}{name} has shape {:?}", t.shape())));
                }
                buf.insert(name.to_string(), t.data().to_vec());
            }
        }
        Ok(TrainState {
            params,
            optimizer,
            step: step as usize,
            best_val_dsc,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!(
                "truncated file: {what} at byte {} needs {n} bytes, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
}
