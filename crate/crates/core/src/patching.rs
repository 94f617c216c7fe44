//! Large-patch partition and reassembly.
//!
//! A map is cut into an `N_h x N_w` grid of `L x L` large patches. Each patch
//! is grown by `P` pixels of context on every side (zeros beyond the image
//! border) and the resulting `(L+2P)^2` windows are stacked along the batch
//! axis in row-major `(b0, gy, gx)` order. After per-patch processing at
//! stride `S`, [`reassemble`] keeps the central `K x K` tokens of each patch
//! (`K = L/S`) and tiles them back into one map.
//!
//! ```
//! use patcher::patching::{partition, reassemble, PatchSpec};
//! use patcher::{Tape, Tensor};
//!
//! let tape = Tape::<f32>::new();
//! let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32));
//! let spec = PatchSpec::new(2, 1, 1)?;
//! let (patches, grid) = partition(x, spec)?;
//! assert_eq!(patches.shape(), [4, 1, 4, 4]);
//! assert_eq!(reassemble(patches, &grid)?.to_vec(), x.to_vec());
//! # Ok::<(), patcher::Error>(())
//! ```

use std::rc::Rc;

use crate::autodiff::{PadMode, Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Large-patch side `L`, context `P` and small-patch side `S`, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchSpec {
    pub large: usize,
    pub context: usize,
    pub small: usize,
}

impl PatchSpec {
    pub fn new(large: usize, context: usize, small: usize) -> Result<Self> {
        let spec = PatchSpec { large, context, small };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let PatchSpec { large: l, context: p, small: s } = *self;
        if l == 0 || s == 0 {
            return Err(Error::Geometry(format!("patch sides must be positive (L={l}, S={s})")));
        }
        if l % s != 0 {
            return Err(Error::Geometry(format!("L={l} is not divisible by S={s}")));
        }
        if p % s != 0 {
            return Err(Error::Geometry(format!(
                "P={p} is not divisible by S={s}; the centre crop would be misaligned"
            )));
        }
        Ok(())
    }

    /// Side of a padded large patch, `L + 2P`.
    pub fn window(&self) -> usize {
        self.large + 2 * self.context
    }

    /// Token-grid side `M = (L + 2P) / S`.
    pub fn tokens_side(&self) -> usize {
        self.window() / self.small
    }

    /// Centre-crop side `K = L / S`.
    pub fn crop(&self) -> usize {
        self.large / self.small
    }

    /// Offset of the centre crop inside the token grid, `P / S`.
    pub fn crop_offset(&self) -> usize {
        self.context / self.small
    }

    /// The spec actually used on an `h x w` input. Inputs smaller than one
    /// large patch become a single patch without context.
    pub fn fit(&self, h: usize, w: usize) -> PatchSpec {
        let side = h.max(w);
        if side >= self.large {
            return *self;
        }
        PatchSpec {
            large: round_up(side.max(1), self.small),
            context: 0,
            small: self.small,
        }
    }
}

pub fn round_up(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Layout of the stacked patches produced by [`partition`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub n_h: usize,
    pub n_w: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub spec: PatchSpec,
}

impl PatchGrid {
    pub fn new(batch: usize, height: usize, width: usize, spec: PatchSpec) -> Result<Self> {
        spec.validate()?;
        let l = spec.large;
        if height % l != 0 || width % l != 0 || height == 0 || width == 0 {
            return Err(Error::Geometry(format!(
                "{height}x{width} map is not a positive multiple of L={l}"
            )));
        }
        Ok(PatchGrid {
            n_h: height / l,
            n_w: width / l,
            batch,
            height,
            width,
            spec,
        })
    }

    /// Number of stacked patches, `B0 * N_h * N_w`.
    pub fn patches(&self) -> usize {
        self.batch * self.n_h * self.n_w
    }

    /// Stacked-batch index of patch `(b0, gy, gx)`.
    pub fn patch_index(&self, b0: usize, gy: usize, gx: usize) -> usize {
        (b0 * self.n_h + gy) * self.n_w + gx
    }

    /// Gather map from `[B0, C, H, W]` to `[B, C, L+2P, L+2P]`.
    pub fn partition_map(&self, channels: usize) -> Vec<usize> {
        let (l, p, win) = (self.spec.large, self.spec.context, self.spec.window());
        let (h, w) = (self.height, self.width);
        let mut map = Vec::with_capacity(self.patches() * channels * win * win);
        for b0 in 0..self.batch {
            for gy in 0..self.n_h {
                for gx in 0..self.n_w {
                    for c in 0..channels {
                        let plane = (b0 * channels + c) * h * w;
                        for i in 0..win {
                            let sy = (gy * l + i).checked_sub(p).filter(|&y| y < h);
                            for j in 0..win {
                                let sx = (gx * l + j).checked_sub(p).filter(|&x| x < w);
                                map.push(match (sy, sx) {
                                    (Some(y), Some(x)) => plane + y * w + x,
                                    _ => GATHER_ZERO,
                                });
                            }
                        }
                    }
                }
            }
        }
        map
    }

    /// Gather map from `[B, C, M, M]` token maps to `[B0, C, H/S, W/S]`.
    pub fn reassemble_map(&self, channels: usize) -> Vec<usize> {
        let (k, off, m) = (self.spec.crop(), self.spec.crop_offset(), self.spec.tokens_side());
        let (oh, ow) = (self.n_h * k, self.n_w * k);
        let mut map = Vec::with_capacity(self.batch * channels * oh * ow);
        for b0 in 0..self.batch {
            for c in 0..channels {
                for y in 0..oh {
                    let (gy, i) = (y / k, y % k + off);
                    for x in 0..ow {
                        let (gx, j) = (x / k, x % k + off);
                        let b = self.patch_index(b0, gy, gx);
                        map.push(((b * channels + c) * m + i) * m + j);
                    }
                }
            }
        }
        map
    }
}

fn dims4<T: Scalar>(x: Var<'_, T>, op: &str) -> Result<[usize; 4]> {
    let s = x.shape();
    <[usize; 4]>::try_from(s.as_slice())
        .map_err(|_| Error::Geometry(format!("{op} expects a [B, C, H, W] map, got {s:?}")))
}

/// Splits `[B0, C, H, W]` into `[B0*N_h*N_w, C, L+2P, L+2P]` context windows.
pub fn partition<'t, T: Scalar>(x: Var<'t, T>, spec: PatchSpec) -> Result<(Var<'t, T>, PatchGrid)> {
    let [b0, c, h, w] = dims4(x, "partition")?;
    let grid = PatchGrid::new(b0, h, w, spec)?;
    let win = spec.window();
    let out = x.gather(&[grid.patches(), c, win, win], Rc::new(grid.partition_map(c)))?;
    Ok((out, grid))
}

/// Crops the centre `K x K` of each `[M, M]` token map and tiles the crops.
pub fn reassemble<'t, T: Scalar>(feats: Var<'t, T>, grid: &PatchGrid) -> Result<Var<'t, T>> {
    let [b, c, mh, mw] = dims4(feats, "reassemble")?;
    let m = grid.spec.tokens_side();
    if b != grid.patches() || mh != m || mw != m {
        return Err(Error::Geometry(format!(
            "reassemble expects [{}, C, {m}, {m}] for this grid, got [{b}, {c}, {mh}, {mw}]",
            grid.patches()
        )));
    }
    let k = grid.spec.crop();
    let shape = [grid.batch, c, grid.n_h * k, grid.n_w * k];
    feats.gather(&shape, Rc::new(grid.reassemble_map(c)))
}

/// Zero-pads the bottom and right of a `[.., H, W]` map up to multiples of
/// `multiple`, returning the original `(H, W)`.
pub fn pad_to_multiple<'t, T: Scalar>(x: Var<'t, T>, multiple: usize) -> Result<(Var<'t, T>, (usize, usize))> {
    if multiple == 0 {
        return Err(Error::Geometry("padding multiple must be positive".into()));
    }
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::Geometry(format!("cannot pad a {}-d tensor spatially", s.len())));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (ph, pw) = (round_up(h, multiple) - h, round_up(w, multiple) - w);
    if ph == 0 && pw == 0 {
        return Ok((x, (h, w)));
    }
    Ok((x.pad2d((0, ph, 0, pw), PadMode::Zero)?, (h, w)))
}

/// Keeps the top-left `h x w` of a `[.., H, W]` map.
pub fn uncrop<'t, T: Scalar>(x: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let n = s.len();
    if n < 2 {
        return Err(Error::Geometry(format!("cannot crop a {n}-d tensor spatially")));
    }
    let mut y = x;
    if s[n - 2] != h {
        y = y.slice(n - 2, 0, h)?;
    }
    if s[n - 1] != w {
        y = y.slice(n - 1, 0, w)?;
    }
    Ok(y)
}
