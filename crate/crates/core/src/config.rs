//! Experiment configuration: a single JSON document, validated with field
//! paths, hashed canonically so every artifact can name the config it came
//! from.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::downstream::{DownstreamConfig, LayerMode, TokenizerMode};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::trainer::{Regime, Schedule};
use crate::upstream::SynthConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub k: usize,
    pub sigma_sq: f64,
    /// Skip tokenization and feed continuous features to the classifier.
    pub continuous: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            k: 16,
            sigma_sq: 1.0,
            continuous: false,
        }
    }
}

impl TokenizerConfig {
    pub fn mode(&self) -> TokenizerMode {
        if self.continuous {
            TokenizerMode::Continuous
        } else {
            TokenizerMode::Discrete
        }
    }
}

/// How the extractor weights start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorInit {
    /// Weights matched to the synthetic world, standing in for a pretrained model.
    #[default]
    Pretrained,
    /// Seeded Gaussian weights with the downstream init std.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub tokenizer: TokenizerConfig,
    pub mode: LayerMode,
    pub regime: Regime,
    pub schedule: Schedule,
    pub alpha: f64,
    pub extractor_init: ExtractorInit,
    pub downstream: DownstreamConfig,
    pub optimizer: AdamConfig,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            tokenizer: TokenizerConfig::default(),
            mode: LayerMode::MultiLayer,
            regime: Regime::FullFinetune,
            schedule: Schedule::default(),
            alpha: 0.0,
            extractor_init: ExtractorInit::default(),
            downstream: DownstreamConfig::default(),
            optimizer: AdamConfig::default(),
            seed: 7,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::json("experiment config", e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Overrides both the experiment seed and the data seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.tokenizer.k < 2 {
            return Err(Error::config("tokenizer.k", "must be >= 2"));
        }
        if !(self.tokenizer.sigma_sq.is_finite() && self.tokenizer.sigma_sq >= 0.0) {
            return Err(Error::config("tokenizer.sigma_sq", "must be finite and >= 0"));
        }
        if let LayerMode::SingleLayer(idx) = self.mode {
            let layers = self.synth.layer_count();
            if idx >= layers {
                return Err(Error::config(
                    "mode.single_layer",
                    format!("layer index {idx} out of range for {layers} layers"),
                ));
            }
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config("alpha", "must be finite and >= 0"));
        }
        self.schedule.validate()?;
        self.optimizer.validate()?;
        let d = &self.downstream;
        if d.embedding_dim == 0 {
            return Err(Error::config("downstream.embedding_dim", "must be >= 1"));
        }
        if d.hidden_dim == 0 {
            return Err(Error::config("downstream.hidden_dim", "must be >= 1"));
        }
        if !(d.init_std.is_finite() && d.init_std >= 0.0) {
            return Err(Error::config("downstream.init_std", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Canonical JSON: keys sorted, no whitespace, output directory dropped.
    pub fn canonical_json(&self) -> String {
        let mut stripped = self.clone();
        stripped.out_dir = None;
        // Round-tripping through `Value` sorts object keys.
        let value = serde_json::to_value(&stripped).expect("config is always serializable");
        serde_json::to_string(&value).expect("value is always serializable")
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
