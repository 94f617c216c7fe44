//! Random rescale and crop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::Result;
use crate::kernels::{resize_planes, ResizeAxis};
use crate::tensor::Tensor;

/// Scale range and crop side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop: usize,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            scale_min: 0.7,
            scale_max: 2.0,
            crop: 256,
        }
    }
}

/// One concrete draw: the scale and the top-left corner of the crop in the
/// rescaled (and, if needed, padded) image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub top: usize,
    pub left: usize,
}

impl Augment {
    fn scaled(&self, side: usize, scale: f64) -> usize {
        ((side as f64 * scale).round() as usize).max(1)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, height: usize, width: usize) -> AugmentParams {
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        let h = self.scaled(height, scale).max(self.crop);
        let w = self.scaled(width, scale).max(self.crop);
        AugmentParams {
            scale,
            top: rng.random_range(0..=h - self.crop),
            left: rng.random_range(0..=w - self.crop),
        }
    }

    /// Rescales (bilinear image, nearest mask), zero-pads bottom and right up
    /// to the crop side, then crops.
    pub fn apply(&self, sample: &Sample, p: AugmentParams) -> Result<Sample> {
        let (c, h, w) = (sample.channels(), sample.height(), sample.width());
        let (sh, sw) = (self.scaled(h, p.scale), self.scaled(w, p.scale));
        let image = resize_planes(
            sample.image.data(),
            c,
            (h, w),
            &ResizeAxis::new(h, sh),
            &ResizeAxis::new(w, sw),
        );
        let (ny, nx) = (nearest(h, sh), nearest(w, sw));
        let mask: Vec<f32> = ny
            .iter()
            .flat_map(|&y| nx.iter().map(move |&x| (y, x)))
            .map(|(y, x)| sample.mask.data()[y * w + x])
            .collect();

        let k = self.crop;
        let crop = |src: &[f32], planes: usize| -> Vec<f32> {
            let mut out = vec![0.0f32; planes * k * k];
            for pl in 0..planes {
                for y in 0..k {
                    let sy = p.top + y;
                    if sy >= sh {
                        break;
                    }
                    for x in 0..k {
                        let sx = p.left + x;
                        if sx >= sw {
                            break;
                        }
                        out[(pl * k + y) * k + x] = src[(pl * sh + sy) * sw + sx];
                    }
                }
            }
            out
        };
        Sample::new(
            sample.id.clone(),
            Tensor::new(&[c, k, k], crop(&image, c))?,
            Tensor::new(&[1, k, k], crop(&mask, 1))?,
        )
    }
}

/// Source index of each output index for nearest-neighbour resizing with
/// half-pixel centres.
fn nearest(input: usize, output: usize) -> Vec<usize> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(input - 1))
        .collect()
}

/// Draws parameters from `rng` and applies them.
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R, cfg: &Augment) -> Result<Sample> {
    let p = cfg.sample(rng, sample.height(), sample.width());
    cfg.apply(sample, p)
}
