//! The JSON run configuration. Every section is optional; missing fields
//! take the defaults below and command-line flags override both.

use std::path::{Path, PathBuf};

use pp_core::corpus::CorpusConfig;
use pp_core::engine::EngineConfig;
use pp_core::model::ModelConfig;
use pp_core::Error;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub outlier_fraction: f32,
    pub outlier_gain: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            num_layers: d.num_layers,
            d_model: d.d_model,
            num_heads: d.num_heads,
            mlp_hidden: d.mlp_hidden,
            vocab_size: d.vocab_size,
            outlier_fraction: d.outlier_fraction,
            outlier_gain: d.outlier_gain,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            d_model: self.d_model,
            num_heads: self.num_heads,
            mlp_hidden: self.mlp_hidden,
            vocab_size: self.vocab_size,
            seed,
            outlier_fraction: self.outlier_fraction,
            outlier_gain: self.outlier_gain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// Zipf tokens within topic vocabularies.
    #[default]
    Topic,
    /// Sampled from a model restricted to topic vocabularies.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub sequences: usize,
    pub seq_len: usize,
    pub num_topics: usize,
    pub segment_sequences: usize,
    pub source: CorpusSource,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { sequences: 256, seq_len: 32, num_topics: 8, segment_sequences: 4, source: CorpusSource::Topic }
    }
}

impl CorpusSection {
    pub fn to_config(&self, vocab_size: usize, seed: u64) -> CorpusConfig {
        CorpusConfig {
            vocab_size,
            sequences: self.sequences,
            seq_len: self.seq_len,
            seed,
            num_topics: self.num_topics,
            segment_sequences: self.segment_sequences,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub batch_size: usize,
    pub seq_len: usize,
    pub max_batches: Option<usize>,
    /// Sequences taken from the calibration corpus.
    pub calibration_batch_size: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { batch_size: 8, seq_len: 32, max_batches: None, calibration_batch_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub model: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: None,
            model: ModelSection::default(),
            corpus: CorpusSection::default(),
            engine: EngineConfig::default(),
            run: RunSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        let cfg: CliConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "{}: config version {} is not supported (expected {CONFIG_VERSION})",
                path.display(),
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, Error> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Seed precedence: flag, then config file, then `PP_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64, Error> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var("PP_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("PP_SEED {v:?} is not an integer"))),
        Err(_) => Ok(0),
    }
}
