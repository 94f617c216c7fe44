//! Seeded synthetic segmentation data: bright ellipses on a dark, noisy
//! background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    /// Side of the square images.
    pub size: usize,
    /// Inclusive range of ellipses per image.
    pub blobs: [usize; 2],
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub channels: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            count: 16,
            size: 32,
            blobs: [1, 3],
            noise: 0.05,
            channels: 1,
        }
    }
}

/// A filled ellipse in pixel coordinates; pixel `(y, x)` is sampled at its
/// centre `(y + 0.5, x + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    /// Semi-axis along the rotated y direction.
    pub b: f64,
    /// Rotation in radians.
    pub theta: f64,
    /// Foreground intensity.
    pub level: f64,
}

impl Ellipse {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.channels == 0 || self.count == 0 {
            return Err(Error::Config(format!("synthetic data sizes must be positive: {self:?}")));
        }
        if self.blobs[0] > self.blobs[1] || !(self.noise >= 0.0) {
            return Err(Error::Config(format!("bad synthetic blob range or noise: {self:?}")));
        }
        Ok(())
    }

    /// The ellipses of every image, in order.
    pub fn shapes(&self) -> Vec<Vec<Ellipse>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.size as f64;
        (0..self.count)
            .map(|_| {
                let k = rng.random_range(self.blobs[0]..=self.blobs[1]);
                (0..k)
                    .map(|_| Ellipse {
                        cy: rng.random_range(0.2 * n..0.8 * n),
                        cx: rng.random_range(0.2 * n..0.8 * n),
                        a: rng.random_range(0.1 * n..0.25 * n),
                        b: rng.random_range(0.1 * n..0.25 * n),
                        theta: rng.random_range(0.0..std::f64::consts::PI),
                        level: rng.random_range(0.6..0.9),
                    })
                    .collect()
            })
            .collect()
    }
}

/// Renders the dataset described by `spec`. Identical specs give
/// bit-identical samples.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let n = spec.size;
    let noise_seed = spec.seed ^ 0x6e6f_6973_65;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    spec.shapes()
        .into_iter()
        .enumerate()
        .map(|(i, blobs)| {
            let mut level = vec![0.1f64; n * n];
            let mut mask = vec![0.0f32; n * n];
            for e in &blobs {
                for y in 0..n {
                    for x in 0..n {
                        if e.contains(y, x) {
                            level[y * n + x] = level[y * n + x].max(e.level);
                            mask[y * n + x] = 1.0;
                        }
                    }
                }
            }
            let mut image = Vec::with_capacity(spec.channels * n * n);
            for _ in 0..spec.channels {
                for &v in &level {
                    let jitter = if spec.noise > 0.0 { normal.sample(&mut noise_rng) } else { 0.0 };
                    image.push((v + jitter).clamp(0.0, 1.0) as f32);
                }
            }
            Sample::new(
                format!("synth_{i:04}"),
                Tensor::new(&[spec.channels, n, n], image)?,
                Tensor::new(&[1, n, n], mask)?,
            )
        })
        .collect()
}
