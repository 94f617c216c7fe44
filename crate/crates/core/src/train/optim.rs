//! Adam and AdamW.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::decays;
use crate::tensor::{ParameterStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Adam,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, AdamW only. Never applied to biases or
    /// normalisation parameters.
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimiser settings: {self:?}")));
        }
        Ok(())
    }
}

/// Moment buffers and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl Optimizer {
    pub fn new(config: OptimConfig, params: &ParameterStore<f32>) -> Self {
        let zeros = |(n, t): (&str, &Tensor<f32>)| (n.to_string(), vec![0.0; t.numel()]);
        Optimizer {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            config,
            step: 0,
        }
    }

    /// One update from the gradients accumulated on `params`.
    pub fn step(&mut self, params: &mut ParameterStore<f32>, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            if p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Contract(format!("non-finite gradient in {name}")));
            }
        }
        let c = &self.config;
        let t = (self.step + 1) as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (name, p) in params.iter_mut() {
            let Some(g) = p.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let m = self.m.get_mut(name).ok_or_else(|| missing(name))?;
            let v = self.v.get_mut(name).ok_or_else(|| missing(name))?;
            let decay = c.kind == OptimKind::AdamW && c.weight_decay > 0.0 && decays(name);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] as f64;
                let mut xi = *x as f64;
                if decay {
                    xi -= lr * c.weight_decay * xi;
                }
                let mi = c.beta1 * m[i] as f64 + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i] as f64 + (1.0 - c.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                xi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                *x = xi as f32;
            }
        }
        self.step += 1;
        Ok(())
    }
}

fn missing(name: &str) -> Error {
    Error::Contract(format!("optimiser has no state for parameter {name}"))
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParameterStore<f32>, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .flat_map(|g| g.iter().map(|&v| (v as f64).powi(2)))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for (_, p) in params.iter_mut() {
            if let Some(g) = p.grad().map(|g| g.iter().map(|v| v * scale).collect::<Vec<_>>()) {
                p.zero_grad();
                p.accumulate_grad(&g).expect("same length");
            }
        }
    }
    norm
}
