//! Per-patch sequence processing: small-patch embedding, efficient
//! self-attention, Mix-FFN and the pre-norm block stack.
//!
//! Tokens are `[B, N, d]` with `N = M^2` laid out row-major over the `M x M`
//! small-patch grid. There is no positional table anywhere; the depthwise
//! convolution inside Mix-FFN supplies position information.

use crate::autodiff::{Conv2dOpts, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init};
use crate::tensor::Scalar;

/// Width and depth of one encoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StageConfig {
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub heads: usize,
    /// Spatial reduction ratio `r` for keys and values.
    pub reduction: usize,
    pub ffn_expansion: usize,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let StageConfig { embed_dim, heads, reduction, ffn_expansion, .. } = *self;
        if embed_dim == 0 || heads == 0 || reduction == 0 || ffn_expansion == 0 {
            return Err(Error::Config(format!("stage sizes must be positive: {self:?}")));
        }
        if embed_dim % heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {embed_dim} is not divisible by {heads} heads"
            )));
        }
        Ok(())
    }

    /// Checks that the reduction ratio tiles an `m x m` token grid.
    pub fn check_grid(&self, m: usize) -> Result<()> {
        if m % self.reduction != 0 {
            return Err(Error::Config(format!(
                "reduction ratio {} does not divide the {m}x{m} token grid",
                self.reduction
            )));
        }
        Ok(())
    }

    /// Registers the parameters of `n_blocks` transformer blocks under
    /// `{prefix}.block.{j}`.
    pub fn init_blocks(&self, init: &mut Init<'_>, prefix: &str) -> Result<()> {
        let (d, r) = (self.embed_dim, self.reduction);
        let hidden = d * self.ffn_expansion;
        for j in 0..self.n_blocks {
            let p = format!("{prefix}.block.{j}");
            init.layer_norm(&format!("{p}.norm1"), d)?;
            for name in ["q", "k", "v", "proj"] {
                init.linear(&format!("{p}.attn.{name}"), d, d)?;
            }
            if r > 1 {
                init.conv2d(&format!("{p}.attn.sr"), d, d, r, 1)?;
                init.layer_norm(&format!("{p}.attn.sr_norm"), d)?;
            }
            init.layer_norm(&format!("{p}.norm2"), d)?;
            init.linear(&format!("{p}.ffn.fc1"), d, hidden)?;
            init.conv2d(&format!("{p}.ffn.dw"), hidden, hidden, 3, hidden)?;
            init.linear(&format!("{p}.ffn.fc2"), hidden, d)?;
        }
        Ok(())
    }
}

fn tokens_dims<T: Scalar>(x: Var<'_, T>) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Geometry(format!("expected [B, N, d] tokens, got {s:?}")));
    }
    let m = (s[1] as f64).sqrt().round() as usize;
    if m * m != s[1] {
        return Err(Error::Geometry(format!("{} tokens do not form a square grid", s[1])));
    }
    Ok((s[0], s[1], s[2], m))
}

/// Embeds every non-overlapping `S x S` block of a `[B, C, W, W]` map as one
/// token through the shared linear layer `{prefix}` (`S^2 C -> d`). Within a
/// block the input vector is ordered channel-major, then row, then column.
pub fn patch_embed<'t, T: Scalar>(ctx: &Ctx<'t, T>, prefix: &str, x: Var<'t, T>, s: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let [b, c, h, w] = <[usize; 4]>::try_from(shape.as_slice())
        .map_err(|_| Error::Geometry(format!("patch_embed expects [B, C, H, W], got {shape:?}")))?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Geometry(format!("{h}x{w} window is not divisible by S={s}")));
    }
    let (mh, mw) = (h / s, w / s);
    let blocks = x
        .reshape(&[b, c, mh, s, mw, s])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[b, mh * mw, c * s * s])?;
    ctx.linear(prefix, blocks)
}

/// `[B, N, d]` tokens to a `[B, d, M, M]` map.
pub fn tokens_to_map<T: Scalar>(x: Var<'_, T>) -> Result<Var<'_, T>> {
    let (b, _, d, m) = tokens_dims(x)?;
    x.permute(&[0, 2, 1])?.reshape(&[b, d, m, m])
}

/// `[B, d, H, W]` map to `[B, H*W, d]` tokens.
pub fn map_to_tokens<T: Scalar>(x: Var<'_, T>) -> Result<Var<'_, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Geometry(format!("expected [B, d, H, W], got {s:?}")));
    }
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

fn split_heads<T: Scalar>(x: Var<'_, T>, heads: usize) -> Result<Var<'_, T>> {
    let s = x.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    x.reshape(&[b, n, heads, d / heads])?.permute(&[0, 2, 1, 3])
}

/// Multi-head attention whose keys and values come from the token grid
/// reduced by a `r x r`, stride-`r` convolution and a layer norm. Returns
/// the output tokens and the `[B, heads, N, N/r^2]` attention weights.
pub fn efficient_self_attention_with_weights<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    prefix: &str,
    x: Var<'t, T>,
    cfg: &StageConfig,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (b, n, d, m) = tokens_dims(x)?;
    let r = cfg.reduction;
    cfg.check_grid(m)?;
    let heads = cfg.heads;

    let q = split_heads(ctx.linear(&format!("{prefix}.q"), x)?, heads)?;
    let kv_src = if r > 1 {
        let grid = tokens_to_map(x)?;
        let opts = Conv2dOpts { stride: r, ..Default::default() };
        let reduced = map_to_tokens(ctx.conv2d(&format!("{prefix}.sr"), grid, opts)?)?;
        ctx.layer_norm(&format!("{prefix}.sr_norm"), reduced)?
    } else {
        x
    };
    let k = split_heads(ctx.linear(&format!("{prefix}.k"), kv_src)?, heads)?;
    let v = split_heads(ctx.linear(&format!("{prefix}.v"), kv_src)?, heads)?;

    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let scores = q.matmul(k.transpose(2, 3)?)?.scale(scale)?;
    let weights = scores.softmax(3)?;
    let out = weights
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, n, d])?;
    Ok((ctx.linear(&format!("{prefix}.proj"), out)?, weights))
}

pub fn efficient_self_attention<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    prefix: &str,
    x: Var<'t, T>,
    cfg: &StageConfig,
) -> Result<Var<'t, T>> {
    Ok(efficient_self_attention_with_weights(ctx, prefix, x, cfg)?.0)
}

/// Linear expansion, 3x3 depthwise convolution over the token grid, GELU,
/// linear projection back to `d`.
pub fn mix_ffn<'t, T: Scalar>(ctx: &Ctx<'t, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    tokens_dims(x)?;
    let h = ctx.linear(&format!("{prefix}.fc1"), x)?;
    let groups = h.shape()[2];
    let opts = Conv2dOpts { pad: 1, groups, ..Default::default() };
    let h = ctx.conv2d(&format!("{prefix}.dw"), tokens_to_map(h)?, opts)?;
    let h = map_to_tokens(h.gelu()?)?;
    ctx.linear(&format!("{prefix}.fc2"), h)
}

/// `x + Attn(LN(x))` followed by `x + MixFFN(LN(x))`.
pub fn vit_block<'t, T: Scalar>(ctx: &Ctx<'t, T>, prefix: &str, x: Var<'t, T>, cfg: &StageConfig) -> Result<Var<'t, T>> {
    let a = efficient_self_attention(ctx, &format!("{prefix}.attn"), ctx.layer_norm(&format!("{prefix}.norm1"), x)?, cfg)?;
    let x = x.add(a)?;
    let f = mix_ffn(ctx, &format!("{prefix}.ffn"), ctx.layer_norm(&format!("{prefix}.norm2"), x)?)?;
    x.add(f)
}

/// The stage's `n_blocks` blocks in sequence.
pub fn vit_stack<'t, T: Scalar>(ctx: &Ctx<'t, T>, prefix: &str, mut x: Var<'t, T>, cfg: &StageConfig) -> Result<Var<'t, T>> {
    for j in 0..cfg.n_blocks {
        x = vit_block(ctx, &format!("{prefix}.block.{j}"), x, cfg)?;
    }
    Ok(x)
}
