//! Run configuration files.
//!
//! A config is a flat list of `section.key = value` lines in TOML syntax:
//!
//! ```toml
//! seed = 7
//! out = "runs/tiny"
//! model.preset = "tiny"
//! model.in_channels = 1
//! data.source = "synth"
//! synth.count = 16
//! optim.kind = "adam"
//! optim.lr = 1e-3
//! train.epochs = 150
//! ```
//!
//! Every key has a default and unknown keys are rejected. `model.preset`
//! picks a base network that the other `model.` and `decoder.` keys
//! override. The hash stored in checkpoints is the 32-bit FNV-1a of the
//! config file's bytes.
//!
//! Without `data.split` every sample is used for training, validation and
//! testing alike.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_root, split, synth_generate, Augment, Sample, Split, SynthSpec};
use crate::decoder::DecoderConfig;
use crate::encoder::{PatcherConfig, STAGES};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::patching::PatchSpec;
use crate::train::{OptimConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Standard,
}

/// A per-stage value written either once for all stages or as a list of
/// four.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerStage {
    All(usize),
    Each([usize; STAGES]),
}

impl PerStage {
    pub fn get(&self) -> [usize; STAGES] {
        match *self {
            PerStage::All(v) => [v; STAGES],
            PerStage::Each(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    pub in_channels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub large_patch: Option<PerStage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context: Option<PerStage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub small_patch: Option<PerStage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dims: Option<[usize; STAGES]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depths: Option<[usize; STAGES]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<[usize; STAGES]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction: Option<[usize; STAGES]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_expansion: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: Preset::Tiny,
            in_channels: 1,
            large_patch: None,
            context: None,
            small_patch: None,
            dims: None,
            depths: None,
            heads: None,
            reduction: None,
            ffn_expansion: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_channels: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Dir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Dataset root holding `images/` and `masks/` when `source = "dir"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Train/val/test ratios. Without it every sample is used for training
    /// and validation is run on the training set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<[f64; 3]>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synth,
            root: None,
            split: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub decoder: DecoderSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synth: SynthSpec,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: default_out(),
            model: ModelSection::default(),
            decoder: DecoderSection::default(),
            data: DataSection::default(),
            synth: SynthSpec::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates config text.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = RunConfig::parse(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok((cfg, text))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let (mut enc, mut dec) = match m.preset {
            Preset::Tiny => (PatcherConfig::tiny(m.in_channels), DecoderConfig::tiny()),
            Preset::Standard => (PatcherConfig::standard(m.in_channels), DecoderConfig::standard()),
        };
        let l = m.large_patch.map(|v| v.get());
        let p = m.context.map(|v| v.get());
        let s = m.small_patch.map(|v| v.get());
        for i in 0..STAGES {
            let cur = enc.patches[i];
            enc.patches[i] = PatchSpec {
                large: l.map_or(cur.large, |v| v[i]),
                context: p.map_or(cur.context, |v| v[i]),
                small: s.map_or(cur.small, |v| v[i]),
            };
            let st = &mut enc.stages[i];
            st.embed_dim = m.dims.map_or(st.embed_dim, |v| v[i]);
            st.n_blocks = m.depths.map_or(st.n_blocks, |v| v[i]);
            st.heads = m.heads.map_or(st.heads, |v| v[i]);
            st.reduction = m.reduction.map_or(st.reduction, |v| v[i]);
            st.ffn_expansion = m.ffn_expansion.unwrap_or(st.ffn_expansion);
        }
        let d = &self.decoder;
        dec.dim = d.dim.unwrap_or(dec.dim);
        dec.mlp_hidden = d.mlp_hidden.clone().unwrap_or(dec.mlp_hidden);
        dec.gate_channels = d.gate_channels.clone().unwrap_or(dec.gate_channels);
        let cfg = ModelConfig { encoder: enc, decoder: dec };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augment(&self) -> Augment {
        Augment {
            scale_min: self.train.scale_min,
            scale_max: self.train.scale_max,
            crop: self.train.crop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.optim.validate()?;
        self.train.validate()?;
        match self.data.source {
            DataSource::Synth => {
                self.synth.validate()?;
                if self.synth.channels != self.model.in_channels {
                    return Err(Error::Config(format!(
                        "synth.channels = {} but model.in_channels = {}",
                        self.synth.channels, self.model.in_channels
                    )));
                }
            }
            DataSource::Dir if self.data.root.is_none() => {
                return Err(Error::Config("data.source = \"dir\" needs data.root".into()));
            }
            DataSource::Dir => {}
        }
        Ok(())
    }

    /// Flat `section.key = value` rendering that [`RunConfig::parse`] reads
    /// back to an equal config.
    pub fn to_text(&self) -> String {
        let table = toml::Table::try_from(self).expect("config serialises to a table");
        let mut out = String::new();
        let mut sections = Vec::new();
        for (key, value) in &table {
            match value {
                toml::Value::Table(t) => sections.push((key, t)),
                v => writeln!(out, "{key} = {v}").unwrap(),
            }
        }
        for (section, t) in sections {
            flatten(&mut out, section, t);
        }
        out
    }

    /// The config hash of a config file's text.
    pub fn hash(text: &str) -> u32 {
        fnv1a(text.as_bytes())
    }

    /// Loads or generates the samples and splits them.
    pub fn datasets(&self) -> Result<Split<Sample>> {
        let all = match self.data.source {
            DataSource::Synth => synth_generate(&self.synth)?,
            DataSource::Dir => {
                let root = self.data.root.as_ref().ok_or_else(|| Error::Config("data.root is not set".into()))?;
                load_root(root, self.model.in_channels)?
            }
        };
        if all.is_empty() {
            return Err(Error::Data("the dataset is empty".into()));
        }
        match self.data.split {
            Some(ratios) => split(all, ratios, self.seed),
            None => Ok(Split { train: all.clone(), val: all.clone(), test: all }),
        }
    }
}

fn flatten(out: &mut String, prefix: &str, table: &toml::Table) {
    for (key, value) in table {
        let path = format!("{prefix}.{key}");
        match value {
            toml::Value::Table(t) => flatten(out, &path, t),
            v => writeln!(out, "{path} = {v}").unwrap(),
        }
    }
}

/// 32-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u32 {
    bytes.iter().fold(0x811c_9dc5u32, |h, &b| (h ^ b as u32).wrapping_mul(0x0100_0193))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0x811c_9dc5);
        assert_eq!(fnv1a(b"a"), 0xe40c_292c);
        assert_eq!(fnv1a(b"foobar"), 0xbf9c_f968);
    }

    #[test]
    fn defaults_and_round_trip() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let mut cfg = RunConfig::default();
        cfg.model.large_patch = Some(PerStage::Each([16, 16, 8, 8]));
        cfg.decoder.dim = Some(8);
        cfg.data.split = Some([0.8, 0.1, 0.1]);
        let text = cfg.to_text();
        assert!(text.lines().all(|l| !l.starts_with('[')), "{text}");
        assert!(text.contains("model.large_patch = [16, 16, 8, 8]"), "{text}");
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn per_stage_scalar_or_list() {
        let cfg = RunConfig::parse("model.context = 0\nmodel.large_patch = [16, 16, 8, 8]").unwrap();
        let m = cfg.model_config().unwrap();
        assert_eq!(m.encoder.patches.map(|p| (p.large, p.context)), [(16, 0), (16, 0), (8, 0), (8, 0)]);
    }

    #[test]
    fn rejects_unknown_keys_and_invalid_geometry() {
        assert!(matches!(RunConfig::parse("model.colour = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("sed = 3"), Err(Error::Config(_))));
        let bad = "model.preset = \"standard\"\nmodel.large_patch = 30\nsynth.channels = 1";
        assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))));
        assert!(RunConfig::parse("data.source = \"dir\"").is_err());
    }
}
