//! The four-stage cascade of Patcher blocks.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init};
use crate::patching::{pad_to_multiple, partition, reassemble, uncrop, PatchSpec};
use crate::tensor::Scalar;
use crate::transformer::{patch_embed, tokens_to_map, vit_stack, StageConfig};

pub const STAGES: usize = 4;

/// Geometry and width of every encoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatcherConfig {
    pub in_channels: usize,
    pub patches: [PatchSpec; STAGES],
    pub stages: [StageConfig; STAGES],
}

fn stages(dims: [usize; 4], depths: [usize; 4], heads: [usize; 4], reduction: [usize; 4]) -> [StageConfig; 4] {
    std::array::from_fn(|i| StageConfig {
        embed_dim: dims[i],
        n_blocks: depths[i],
        heads: heads[i],
        reduction: reduction[i],
        ffn_expansion: 4,
    })
}

impl PatcherConfig {
    /// Full-size network: `L = 32`, `P = 8`, `S = 2`, widths
    /// `[64, 128, 320, 512]`, depths `[3, 6, 40, 3]`.
    pub fn standard(in_channels: usize) -> Self {
        PatcherConfig {
            in_channels,
            patches: [PatchSpec { large: 32, context: 8, small: 2 }; 4],
            stages: stages([64, 128, 320, 512], [3, 6, 40, 3], [1, 2, 5, 8], [8, 4, 2, 1]),
        }
    }

    /// Desk-scale network used by tests and quick experiments.
    pub fn tiny(in_channels: usize) -> Self {
        PatcherConfig {
            in_channels,
            patches: [PatchSpec { large: 8, context: 2, small: 2 }; 4],
            stages: stages([8, 16, 16, 32], [1, 1, 1, 1], [1, 2, 2, 4], [2, 2, 1, 1]),
        }
    }

    pub fn dims(&self) -> [usize; STAGES] {
        self.stages.map(|s| s.embed_dim)
    }

    /// Overall downsampling of the cascade, the product of the small-patch
    /// sides.
    pub fn stride(&self) -> usize {
        self.patches.iter().map(|p| p.small).product()
    }

    pub fn stage_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.stages[i - 1].embed_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("input channel count must be positive".into()));
        }
        for (i, (spec, stage)) in self.patches.iter().zip(&self.stages).enumerate() {
            let ctx = |e: Error| Error::Config(format!("stage {i}: {e}"));
            spec.validate().map_err(ctx)?;
            stage.validate().map_err(ctx)?;
            stage.check_grid(spec.tokens_side()).map_err(ctx)?;
        }
        Ok(())
    }

    pub fn init(&self, init: &mut Init<'_>) -> Result<()> {
        for i in 0..STAGES {
            let (spec, stage) = (self.patches[i], self.stages[i]);
            let fan_in = self.stage_in_channels(i) * spec.small * spec.small;
            init.linear(&format!("enc.{i}.embed"), fan_in, stage.embed_dim)?;
            stage.init_blocks(init, &format!("enc.{i}"))?;
        }
        Ok(())
    }
}

/// One Patcher block: partition into context windows, embed small patches,
/// run the transformer stack, crop each patch centre and reassemble.
/// Maps `[B, C, H, W]` to `[B, d, ceil(H/S), ceil(W/S)]`.
pub fn patcher_block<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    prefix: &str,
    x: Var<'t, T>,
    spec: PatchSpec,
    stage: &StageConfig,
) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Geometry(format!("patcher block expects [B, C, H, W], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let spec = spec.fit(h, w);
    stage.check_grid(spec.tokens_side())?;
    let (padded, _) = pad_to_multiple(x, spec.large)?;
    let (patches, grid) = partition(padded, spec)?;
    let tokens = patch_embed(ctx, &format!("{prefix}.embed"), patches, spec.small)?;
    let tokens = vit_stack(ctx, prefix, tokens, stage)?;
    let out = reassemble(tokens_to_map(tokens)?, &grid)?;
    uncrop(out, h.div_ceil(spec.small), w.div_ceil(spec.small))
}

/// Runs the cascade on an image whose sides are multiples of
/// [`PatcherConfig::stride`], returning the four expert maps.
pub fn encode<'t, T: Scalar>(ctx: &Ctx<'t, T>, cfg: &PatcherConfig, image: Var<'t, T>) -> Result<[Var<'t, T>; STAGES]> {
    let s = image.shape();
    if s.len() != 4 || s[1] != cfg.in_channels {
        return Err(Error::Geometry(format!(
            "encoder expects [B, {}, H, W], got {s:?}",
            cfg.in_channels
        )));
    }
    let small = cfg.patches[0].small;
    if s[2] < small || s[3] < small {
        return Err(Error::Geometry(format!(
            "{}x{} input is smaller than one {small}x{small} small patch",
            s[2], s[3]
        )));
    }
    let mut x = image;
    let mut out = Vec::with_capacity(STAGES);
    for i in 0..STAGES {
        x = patcher_block(ctx, &format!("enc.{i}"), x, cfg.patches[i], &cfg.stages[i])?;
        out.push(x);
    }
    Ok(out.try_into().unwrap_or_else(|_| unreachable!()))
}

/// Spatial size of every stage output for an `h x w` input, after the
/// input is padded to a multiple of the cascade stride.
pub fn stage_shapes(cfg: &PatcherConfig, h: usize, w: usize) -> [(usize, usize, usize); STAGES] {
    let m = cfg.stride();
    let (mut h, mut w) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    std::array::from_fn(|i| {
        let s = cfg.patches[i].small;
        h = h.div_ceil(s);
        w = w.div_ceil(s);
        (cfg.stages[i].embed_dim, h, w)
    })
}
