//! Mixture-of-experts decoder.
//!
//! Each encoder map is projected to `D` channels by its own pixel-wise MLP
//! and resized to the resolution of the first map; these are the experts
//! `F_i`. A convolutional gate looks at all experts at once and emits
//! per-pixel softmax weights `W_i`. The combined map
//! `O = sum_i W_i * F_i` goes through a final pixel-wise MLP to give one
//! logit per pixel, upsampled x2.

use crate::autodiff::{concat, Conv2dOpts, Var};
use crate::encoder::STAGES;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DecoderConfig {
    /// Expert width `D`.
    pub dim: usize,
    /// Hidden widths of the expert and prediction MLPs.
    pub mlp_hidden: Vec<usize>,
    /// Output channels of the 3x3 gate convolutions; the last is the
    /// number of experts.
    pub gate_channels: Vec<usize>,
}

impl DecoderConfig {
    pub fn standard() -> Self {
        DecoderConfig {
            dim: 256,
            mlp_hidden: vec![256, 256],
            gate_channels: vec![256, 256, 256, 4],
        }
    }

    pub fn tiny() -> Self {
        DecoderConfig {
            dim: 16,
            mlp_hidden: vec![16, 16],
            gate_channels: vec![16, 16, 16, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.mlp_hidden.contains(&0) || self.gate_channels.contains(&0) {
            return Err(Error::Config(format!("decoder widths must be positive: {self:?}")));
        }
        if self.gate_channels.last() != Some(&STAGES) {
            return Err(Error::Config(format!(
                "the gate must end in {STAGES} channels, one per expert; got {:?}",
                self.gate_channels
            )));
        }
        Ok(())
    }

    fn widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(&self.mlp_hidden);
        w.push(output);
        w
    }

    fn mlp_layers(&self) -> usize {
        self.mlp_hidden.len() + 1
    }

    /// Registers `dec.expert.{i}`, `dec.gate.{k}` and `dec.head`.
    pub fn init(&self, init: &mut Init<'_>, expert_channels: [usize; STAGES]) -> Result<()> {
        for (i, &c) in expert_channels.iter().enumerate() {
            init.mlp(&format!("dec.expert.{i}"), &self.widths(c, self.dim))?;
        }
        let mut input = STAGES * self.dim;
        for (k, &out) in self.gate_channels.iter().enumerate() {
            init.conv2d(&format!("dec.gate.{k}"), out, input, 3, 1)?;
            input = out;
        }
        init.mlp("dec.head", &self.widths(self.dim, 1))
    }
}

/// Intermediate decoder maps, kept for inspection and visualisation.
pub struct ExpertFeatures<'t, T: Scalar> {
    /// `F_i`, each `[B, D, H/2, W/2]`.
    pub experts: [Var<'t, T>; STAGES],
    /// `[B, 4, H/2, W/2]`; channel `i` is `W_i`.
    pub weights: Var<'t, T>,
    /// `O`, `[B, D, H/2, W/2]`.
    pub combined: Var<'t, T>,
}

impl<'t, T: Scalar> ExpertFeatures<'t, T> {
    /// `W_i` as a `[B, 1, H/2, W/2]` map.
    pub fn weight(&self, i: usize) -> Result<Var<'t, T>> {
        self.weights.slice(1, i, 1)
    }
}

/// Per-expert pixel MLP at native resolution, then bilinear resize to the
/// first map's size.
pub fn expert_project<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    cfg: &DecoderConfig,
    maps: &[Var<'t, T>; STAGES],
) -> Result<[Var<'t, T>; STAGES]> {
    let s0 = maps[0].shape();
    let (h, w) = (s0[2], s0[3]);
    let mut out = Vec::with_capacity(STAGES);
    for (i, &m) in maps.iter().enumerate() {
        let f = ctx.pixel_mlp(&format!("dec.expert.{i}"), cfg.mlp_layers(), m)?;
        let s = f.shape();
        out.push(if (s[2], s[3]) == (h, w) { f } else { f.resize_bilinear(h, w)? });
    }
    Ok(out.try_into().unwrap_or_else(|_| unreachable!()))
}

/// Softmax gate over the concatenated experts: 3x3 convolutions with ReLU
/// between them, softmax across the final channel axis.
pub fn gate<'t, T: Scalar>(ctx: &Ctx<'t, T>, cfg: &DecoderConfig, experts: &[Var<'t, T>; STAGES]) -> Result<Var<'t, T>> {
    let mut h = concat(experts, 1)?;
    let n = cfg.gate_channels.len();
    let opts = Conv2dOpts { pad: 1, ..Default::default() };
    for k in 0..n {
        h = ctx.conv2d(&format!("dec.gate.{k}"), h, opts)?;
        if k + 1 < n {
            h = h.relu()?;
        }
    }
    h.softmax(1)
}

/// `O = sum_i W_i * F_i`, with `weights` as `[B, 4, H, W]` broadcast over the
/// channel axis of every `F_i`.
pub fn combine<'t, T: Scalar>(experts: &[Var<'t, T>; STAGES], weights: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = experts[0].shape();
    let mut acc: Option<Var<'t, T>> = None;
    for (i, &f) in experts.iter().enumerate() {
        if f.shape() != shape {
            return Err(Error::shape("combine", &shape, &f.shape()));
        }
        let term = weights.slice(1, i, 1)?.expand(&shape)?.mul(f)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("four experts"))
}

/// Prediction MLP on `O`, bilinear x2 upsampling and cropping to
/// `out_h x out_w`. Returns raw logits `[B, 1, out_h, out_w]`.
pub fn predict<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    cfg: &DecoderConfig,
    combined: Var<'t, T>,
    out_h: usize,
    out_w: usize,
) -> Result<Var<'t, T>> {
    let z = ctx.pixel_mlp("dec.head", cfg.mlp_layers(), combined)?;
    let s = z.shape();
    let z = z.resize_bilinear(2 * s[2], 2 * s[3])?;
    crate::patching::uncrop(z, out_h, out_w)
}

/// Experts, gate and combination in one call.
pub fn mixture<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    cfg: &DecoderConfig,
    maps: &[Var<'t, T>; STAGES],
) -> Result<ExpertFeatures<'t, T>> {
    let experts = expert_project(ctx, cfg, maps)?;
    let weights = gate(ctx, cfg, &experts)?;
    let combined = combine(&experts, weights)?;
    Ok(ExpertFeatures { experts, weights, combined })
}
