//! Parameter binding and the handful of layers every model piece shares.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Conv2dOpts, Tape, Var};
use crate::error::Result;
use crate::tensor::{ParameterStore, Scalar, Tensor};

/// Layer-norm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-6;

/// A forward pass in progress: the tape being recorded and the parameters
/// it reads.
#[derive(Clone, Copy)]
pub struct Ctx<'t, T: Scalar = f32> {
    pub tape: &'t Tape<T>,
    pub params: &'t ParameterStore<T>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, params: &'t ParameterStore<T>) -> Self {
        Ctx { tape, params }
    }

    /// Records parameter `name` on the tape.
    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        Ok(self.tape.param(name, self.params.get(name)?))
    }

    /// `x @ W + b` over the last axis, reading `{prefix}.weight` (`[in, out]`)
    /// and `{prefix}.bias`.
    pub fn linear(&self, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        x.matmul(w)?.bias_add(b)
    }

    pub fn layer_norm(&self, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let g = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        x.layer_norm(g, b, LN_EPS)
    }

    pub fn conv2d(&self, prefix: &str, x: Var<'t, T>, opts: Conv2dOpts) -> Result<Var<'t, T>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        x.conv2d(w, Some(b), opts)
    }

    /// Pixel-wise MLP over the channel axis of a `[B, C, H, W]` map: linear
    /// layers `{prefix}.0`, `{prefix}.1`, ... with ReLU between them.
    pub fn pixel_mlp(&self, prefix: &str, layers: usize, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = x.permute(&[0, 2, 3, 1])?;
        for i in 0..layers {
            h = self.linear(&format!("{prefix}.{i}"), h)?;
            if i + 1 < layers {
                h = h.relu()?;
            }
        }
        h.permute(&[0, 3, 1, 2])
    }
}

/// Seeded parameter initialisation.
///
/// Linear weights draw from a normal with std 0.02 truncated at two standard
/// deviations, convolution weights from Kaiming fan-out normal; biases and
/// layer-norm shifts start at zero and layer-norm scales at one.
pub struct Init<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParameterStore<f32>,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParameterStore<f32>, seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store,
        }
    }

    fn normal(&mut self, shape: &[usize], std: f64, truncate: bool) -> Tensor<f32> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = dist.sample(rng);
            if !truncate || v.abs() <= 2.0 * std {
                break v as f32;
            }
        })
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = self.normal(&[fan_in, fan_out], 0.02, true);
        self.store.insert(format!("{prefix}.weight"), w)?;
        self.store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.weight"), Tensor::ones(&[dim]))?;
        self.store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]))
    }

    /// `[out, in / groups, k, k]` weight plus `[out]` bias.
    pub fn conv2d(&mut self, prefix: &str, out: usize, input: usize, k: usize, groups: usize) -> Result<()> {
        let fan_out = k * k * out / groups;
        let w = self.normal(&[out, input / groups, k, k], (2.0 / fan_out as f64).sqrt(), false);
        self.store.insert(format!("{prefix}.weight"), w)?;
        self.store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]))
    }

    /// Linear layers `{prefix}.0 ..` mapping `widths[0] -> .. -> widths[n]`,
    /// with Kaiming fan-in normal weights so ReLU stacks keep their scale.
    pub fn mlp(&mut self, prefix: &str, widths: &[usize]) -> Result<()> {
        for (i, pair) in widths.windows(2).enumerate() {
            let w = self.normal(&[pair[0], pair[1]], (2.0 / pair[0] as f64).sqrt(), false);
            self.store.insert(format!("{prefix}.{i}.weight"), w)?;
            self.store.insert(format!("{prefix}.{i}.bias"), Tensor::zeros(&[pair[1]]))?;
        }
        Ok(())
    }
}

/// Whether AdamW weight decay applies to a parameter: weights of linear and
/// convolution layers only, never biases or normalisation parameters.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight") && !is_norm(name)
}

fn is_norm(name: &str) -> bool {
    name.rsplit('.')
        .nth(1)
        .is_some_and(|layer| layer.starts_with("norm") || layer.ends_with("norm"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_truncated() {
        let mut a = ParameterStore::new();
        let mut b = ParameterStore::new();
        Init::new(&mut a, 7).linear("fc", 50, 40).unwrap();
        Init::new(&mut b, 7).linear("fc", 50, 40).unwrap();
        let w = a.get("fc.weight").unwrap();
        assert_eq!(w.data(), b.get("fc.weight").unwrap().data());
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(a.get("fc.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decay_excludes_norms_and_biases() {
        assert!(decays("enc.0.block.0.attn.q.weight"));
        assert!(decays("dec.gate.0.weight"));
        assert!(!decays("enc.0.block.0.norm1.weight"));
        assert!(!decays("enc.0.block.0.attn.sr_norm.weight"));
        assert!(!decays("dec.gate.0.bias"));
    }
}
