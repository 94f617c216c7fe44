//! The full segmentation network: encoder cascade plus mixture-of-experts
//! decoder.
//!
//! ```
//! use patcher::model::ModelConfig;
//! use patcher::{Tape, Tensor};
//!
//! let cfg = ModelConfig::tiny(1);
//! let params = cfg.init(0)?;
//! let image = Tensor::zeros(&[1, 1, 20, 24]);
//! let out = patcher::model::infer(&cfg, &params, &image)?;
//! assert_eq!(out.logits.shape(), [1, 1, 20, 24]);
//! assert_eq!(out.weights.shape(), [1, 4, 16, 16]);
//! # Ok::<(), patcher::Error>(())
//! ```

use crate::autodiff::{Tape, Var};
use crate::decoder::{mixture, predict, DecoderConfig, ExpertFeatures};
use crate::encoder::{encode, PatcherConfig};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init};
use crate::patching::pad_to_multiple;
use crate::tensor::{ParameterStore, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub encoder: PatcherConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn standard(in_channels: usize) -> Self {
        ModelConfig {
            encoder: PatcherConfig::standard(in_channels),
            decoder: DecoderConfig::standard(),
        }
    }

    pub fn tiny(in_channels: usize) -> Self {
        ModelConfig {
            encoder: PatcherConfig::tiny(in_channels),
            decoder: DecoderConfig::tiny(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }

    /// Freshly initialised parameters.
    pub fn init(&self, seed: u64) -> Result<ParameterStore<f32>> {
        self.validate()?;
        let mut store = ParameterStore::new();
        let mut init = Init::new(&mut store, seed);
        self.encoder.init(&mut init)?;
        self.decoder.init(&mut init, self.encoder.dims())?;
        Ok(store)
    }
}

pub struct Forward<'t, T: Scalar> {
    /// `[B, 1, H, W]` raw logits at the input resolution.
    pub logits: Var<'t, T>,
    pub features: ExpertFeatures<'t, T>,
}

/// Forward pass on `[B, C, H, W]`. The image is zero-padded to a multiple of
/// the encoder stride and the logits cropped back to `H x W`.
pub fn forward<'t, T: Scalar>(ctx: &Ctx<'t, T>, cfg: &ModelConfig, image: Var<'t, T>) -> Result<Forward<'t, T>> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::Geometry(format!("model expects [B, C, H, W], got {s:?}")));
    }
    let (padded, (h, w)) = pad_to_multiple(image, cfg.encoder.stride())?;
    let maps = encode(ctx, &cfg.encoder, padded)?;
    let features = mixture(ctx, &cfg.decoder, &maps)?;
    let logits = predict(ctx, &cfg.decoder, features.combined, h, w)?;
    Ok(Forward { logits, features })
}

/// Detached outputs of one forward pass.
pub struct Inference {
    pub logits: Tensor<f32>,
    /// Gate weights `[B, 4, H'/2, W'/2]` on the padded grid.
    pub weights: Tensor<f32>,
}

pub fn infer(cfg: &ModelConfig, params: &ParameterStore<f32>, image: &Tensor<f32>) -> Result<Inference> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, params);
    let out = forward(&ctx, cfg, tape.constant(image.clone()))?;
    Ok(Inference {
        logits: out.logits.value(),
        weights: out.features.weights.value(),
    })
}
