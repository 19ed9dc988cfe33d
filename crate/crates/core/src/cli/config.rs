//! Experiment configuration: a JSON document naming the languages, their
//! corpus files, the pairing policy, and the model/training settings.
//!
//! Schema (defaults in parentheses):
//!
//! ```json
//! {
//!   "languages": ["eng", "fra"],
//!   "corpora": { "eng": ["data/eng-a.tsv"], "fra": ["data/fra-a.tsv"] },
//!   "pairs": null,
//!   "identity_language": "fra",
//!   "paraphrase_supervision": false,
//!   "dev_fraction": 0.05,
//!   "test_fraction": 0.0,
//!   "dev_max_examples": 1000,
//!   "bpe_merges": 10000,
//!   "model": { "emb_dim": 512, "rnn_dim": 1024, "rnn_dropout": 0.2,
//!              "word_dropout_src": 0.1, "word_dropout_tgt": 0.1,
//!              "layer_norm": true },
//!   "train": { "learning_rate": 3e-4, "token_budget": 2000,
//!              "validation_every": 2500, "patience": 5,
//!              "smoothing_decay": 1e-4, "clip_norm": 1.0,
//!              "max_steps": null, "max_epochs": null,
//!              "bucket_size": 256, "beam_size": 12 },
//!   "seed": 42,
//!   "output_dir": "runs/exp"
//! }
//! ```
//!
//! The environment variable `NMT_SEED` overrides `seed`. The first
//! language is the pivot; when `pairs` is null every language pair
//! touching one of the first two languages is used.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Direction, TrainingSetPolicy};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainOptions;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSettings {
    pub emb_dim: usize,
    pub rnn_dim: usize,
    #[serde(default = "d_rnn_dropout")]
    pub rnn_dropout: f64,
    #[serde(default = "d_word_dropout")]
    pub word_dropout_src: f64,
    #[serde(default = "d_word_dropout")]
    pub word_dropout_tgt: f64,
    #[serde(default = "d_true")]
    pub layer_norm: bool,
}

impl ModelSettings {
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            emb_dim: self.emb_dim,
            rnn_dim: self.rnn_dim,
            vocab_size,
            rnn_dropout: self.rnn_dropout,
            word_dropout_src: self.word_dropout_src,
            word_dropout_tgt: self.word_dropout_tgt,
            layer_norm: self.layer_norm,
            layers: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub token_budget: usize,
    pub validation_every: u64,
    pub patience: u32,
    pub smoothing_decay: f64,
    pub clip_norm: f64,
    pub max_steps: Option<u64>,
    pub max_epochs: Option<u64>,
    pub bucket_size: usize,
    pub beam_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 3e-4,
            token_budget: 2000,
            validation_every: 2500,
            patience: 5,
            smoothing_decay: 1e-4,
            clip_norm: 1.0,
            max_steps: None,
            max_epochs: None,
            bucket_size: 256,
            beam_size: 12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub languages: Vec<String>,
    pub corpora: BTreeMap<String, Vec<PathBuf>>,
    #[serde(default)]
    pub pairs: Option<Vec<(String, String)>>,
    #[serde(default)]
    pub identity_language: Option<String>,
    #[serde(default)]
    pub paraphrase_supervision: bool,
    #[serde(default = "d_dev_fraction")]
    pub dev_fraction: f64,
    #[serde(default)]
    pub test_fraction: f64,
    #[serde(default = "d_dev_max")]
    pub dev_max_examples: usize,
    #[serde(default = "d_merges")]
    pub bpe_merges: usize,
    pub model: ModelSettings,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default = "d_seed")]
    pub seed: u64,
    pub output_dir: PathBuf,
}

fn d_rnn_dropout() -> f64 {
    0.2
}
fn d_word_dropout() -> f64 {
    0.1
}
fn d_true() -> bool {
    true
}
fn d_dev_fraction() -> f64 {
    0.05
}
fn d_dev_max() -> usize {
    1000
}
fn d_merges() -> usize {
    10_000
}
fn d_seed() -> u64 {
    42
}

impl ExperimentConfig {
    /// Parses and validates a configuration file. `NMT_SEED` in the
    /// environment overrides the configured seed.
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&raw)
            .map_err(|e| Error::format(path, format!("bad experiment config: {e}")))?;
        if let Ok(seed) = std::env::var("NMT_SEED") {
            cfg.seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("NMT_SEED `{seed}` is not an integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::Config("no languages configured".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for lang in &self.languages {
            if !seen.insert(lang) {
                return Err(Error::Config(format!("language `{lang}` listed twice")));
            }
            let files = self
                .corpora
                .get(lang)
                .ok_or_else(|| Error::Config(format!("language `{lang}` has no corpora")))?;
            if files.is_empty() {
                return Err(Error::Config(format!(
                    "language `{lang}` needs at least one corpus file"
                )));
            }
            for f in files {
                if !f.exists() {
                    return Err(Error::Config(format!(
                        "corpus file {} does not exist",
                        f.display()
                    )));
                }
            }
        }
        if let Some(lang) = &self.identity_language {
            if !self.languages.contains(lang) {
                return Err(Error::Config(format!(
                    "identity language `{lang}` is not in the language list"
                )));
            }
        }
        if let Some(pairs) = &self.pairs {
            for (a, b) in pairs {
                if !self.languages.contains(a) || !self.languages.contains(b) {
                    return Err(Error::Config(format!(
                        "pair ({a}, {b}) references an unknown language"
                    )));
                }
            }
        }
        if !(0.0..1.0).contains(&self.dev_fraction)
            || !(0.0..1.0).contains(&self.test_fraction)
            || self.dev_fraction + self.test_fraction >= 1.0
        {
            return Err(Error::Config(
                "dev/test fractions must be in [0,1) and sum below 1".into(),
            ));
        }
        Ok(())
    }

    pub fn policy(&self) -> TrainingSetPolicy {
        TrainingSetPolicy {
            languages: self.languages.clone(),
            pairs: self.pairs.clone(),
            directions: Direction::Both,
            identity_language: self.identity_language.clone(),
            paraphrase_supervision: self.paraphrase_supervision,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            learning_rate: self.train.learning_rate,
            token_budget: self.train.token_budget,
            validation_every: self.train.validation_every,
            patience: self.train.patience,
            smoothing_decay: self.train.smoothing_decay,
            clip_norm: self.train.clip_norm,
            max_steps: self.train.max_steps,
            max_epochs: self.train.max_epochs,
            bucket_size: self.train.bucket_size,
            seed: self.seed,
            checkpoint_dir: Some(self.output_dir.clone()),
            log_path: Some(self.output_dir.join("train.log.tsv")),
        }
    }

    // Prepared-artifact locations inside the output directory.
    pub fn vocab_path(&self) -> PathBuf {
        self.output_dir.join("vocab.tsv")
    }
    pub fn codes_path(&self, lang: &str) -> PathBuf {
        self.output_dir.join(format!("codes.{lang}"))
    }
    pub fn pairs_path(&self, split: &str) -> PathBuf {
        self.output_dir.join(format!("{split}.pairs"))
    }
}
