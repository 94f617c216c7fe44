//! Samples, PNG ingestion, the synthetic ellipse dataset, augmentation and
//! dataset splitting.

mod augment;
mod io;
mod split;
pub mod synth;

pub use augment::{augment, Augment, AugmentParams};
pub use io::{load_dir, load_image, load_root, save_gray, save_sample, to_u8};
pub use split::{split, Split};
pub use synth::{synth_generate, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[C, H, W]` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, H, W]` with values in `{0, 1}`.
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
            return Err(Error::Data(format!(
                "{id}: image {is:?} and mask {ms:?} are not aligned [C, H, W] / [1, H, W] maps"
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("{id}: mask is not binary")));
        }
        Ok(Sample { id, image, mask })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Stacks equally sized samples into `[B, C, H, W]` images and
/// `[B, 1, H, W]` masks.
pub fn batch(samples: &[Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot batch zero samples".into()))?;
    let shape = first.image.shape().to_vec();
    let mut images = Vec::with_capacity(samples.len() * first.image.numel());
    let mut masks = Vec::with_capacity(samples.len() * first.mask.numel());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Data(format!(
                "{}: size {:?} differs from {:?} within a batch",
                s.id,
                s.image.shape(),
                shape
            )));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    let b = samples.len();
    Ok((
        Tensor::new(&[b, shape[0], shape[1], shape[2]], images)?,
        Tensor::new(&[b, 1, shape[1], shape[2]], masks)?,
    ))
}
