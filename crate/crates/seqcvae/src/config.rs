//! Resolved run configuration: one JSON file with a section per module,
//! flag overrides applied before any work starts, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelVariant};
use crate::sample::LatentMode;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Grammar JSON path; the built-in desk grammar when absent.
    pub grammar_path: Option<String>,
    pub n_scenes: usize,
    pub captions_per_scene: usize,
    pub feature_dim: usize,
    /// Minimum token frequency for the vocabulary.
    pub min_count: usize,
    /// train/val/test fractions, must sum to 1.
    pub split: (f64, f64, f64),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            grammar_path: None,
            n_scenes: 30,
            captions_per_scene: 4,
            feature_dim: 8,
            min_count: 1,
            split: (0.8, 0.1, 0.1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub embed: usize,
    pub latent: usize,
    pub hidden: usize,
    pub blm_hidden: usize,
    pub enc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // desk-scale defaults; the full-scale setting uses 512 everywhere
        ModelConfig { variant: ModelVariant::SeqCvae, embed: 16, latent: 16, hidden: 32, blm_hidden: 24, enc_hidden: 32 }
    }
}

impl ModelConfig {
    pub fn dims(&self, vocab: usize, cond: usize) -> ModelDims {
        ModelDims {
            vocab,
            embed: self.embed,
            latent: self.latent,
            hidden: self.hidden,
            cond,
            blm_hidden: self.blm_hidden,
            enc_hidden: self.enc_hidden,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 150, batch_size: 8, lr: 3e-3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub k: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub mode: LatentMode,
    /// Cap on evaluated test conditions; all of them when absent.
    pub num_conditions: Option<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { k: 20, temperature: 1.0, max_len: 16, mode: LatentMode::Sample, num_conditions: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Captions kept per condition for the diversity metrics.
    pub top_n: usize,
    /// Neighbor conditions pooled for consensus re-ranking.
    pub neighbors: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { top_n: 5, neighbors: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: "out".to_string(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Flag overrides; `None` keeps the file/default value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<ModelVariant>,
    pub k: Option<usize>,
    pub out: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Load `path` when given, else defaults; then apply flag overrides and
    /// propagate the root seed into the training section.
    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = ov.seed {
            cfg.seed = seed;
        }
        if let Some(variant) = ov.variant {
            cfg.model.variant = variant;
        }
        if let Some(k) = ov.k {
            cfg.sample.k = k;
        }
        if let Some(out) = &ov.out {
            cfg.out = out.clone();
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    /// Persist the resolved config next to the outputs.
    pub fn write_resolved(&self) -> Result<()> {
        std::fs::create_dir_all(self.out_dir())?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(self.out_dir().join("config.json"), text + "\n")?;
        Ok(())
    }
}
