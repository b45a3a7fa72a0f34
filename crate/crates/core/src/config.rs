//! Run configuration. Every field has a desk-scale default; files only need
//! to list what they change.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::WorldConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub retrieval: RetrievalConfig,
    pub generation: GenerationConfig,
    pub vlr: StageConfig,
    pub llr: StageConfig,
    pub decoder: StageConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub samples: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Tokens must occur more often than this to enter the vocabulary.
    pub min_count: usize,
    pub dictionary_size: usize,
    pub world: WorldConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared feature width `d`.
    pub features: usize,
    pub patch_hidden: usize,
    pub text_hidden: usize,
    pub attention_hidden: usize,
    /// Hidden units of both decoder LSTMs.
    pub decoder_hidden: usize,
    pub max_report_tokens: usize,
    pub max_sentence_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// `k_r`
    pub reports: usize,
    /// `k_s`
    pub sentences: usize,
    /// `n`
    pub keywords: usize,
    /// `m`
    pub diseases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_sentences: usize,
    pub max_words: usize,
    /// Length cap of the flat decoder, which writes the report as one sentence.
    pub max_flat_words: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Multiply by `factor` once for each milestone reached.
    Milestones { at: Vec<usize>, factor: f64 },
    /// Multiply by `factor` every `period` epochs.
    Every { period: usize, factor: f64 },
}

impl Schedule {
    pub fn lr(&self, epoch: usize, base: f64) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Milestones { at, factor } => {
                let passed = at.iter().filter(|&&m| epoch >= m).count();
                base * factor.powi(passed as i32)
            }
            Schedule::Every { period, factor } => base * factor.powi((epoch / period) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Separate rate for the image encoder and heads; VLR only.
    pub image_lr: Option<f64>,
    pub schedule: Schedule,
    /// Sentence pairs drawn per epoch; LLR only. Defaults to twice the
    /// number of training reports.
    pub pairs: Option<usize>,
    pub weight_decay: f64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            image_lr: None,
            schedule: Schedule::Constant,
            pairs: None,
            weight_decay: 1e-5,
            clip: 5.0,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            split: [0.7, 0.1, 0.2],
            min_count: 3,
            dictionary_size: 16,
            world: WorldConfig::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: 64,
            patch_hidden: 64,
            text_hidden: 64,
            attention_hidden: 32,
            decoder_hidden: 32,
            max_report_tokens: 128,
            max_sentence_tokens: 32,
        }
    }
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            reports: 5,
            sentences: 5,
            keywords: 5,
            diseases: 5,
        }
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_sentences: 10,
            max_words: 32,
            max_flat_words: 128,
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 123,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            retrieval: RetrievalConfig::default(),
            generation: GenerationConfig::default(),
            vlr: StageConfig {
                epochs: 45,
                batch_size: 16,
                lr: 2e-3,
                image_lr: Some(2e-3),
                schedule: Schedule::Milestones { at: vec![20], factor: 0.1 },
                ..StageConfig::default()
            },
            llr: StageConfig {
                epochs: 30,
                batch_size: 64,
                lr: 2e-3,
                schedule: Schedule::Every { period: 20, factor: 0.2 },
                ..StageConfig::default()
            },
            decoder: StageConfig {
                epochs: 30,
                batch_size: 32,
                lr: 3e-3,
                schedule: Schedule::Milestones { at: vec![22], factor: 0.1 },
                ..StageConfig::default()
            },
        }
    }
}

impl Config {
    /// The published training settings: 100 epochs per stage, the original
    /// learning rates and schedules, 512 decoder units.
    pub fn published() -> Self {
        let d = Self::default();
        Self {
            model: ModelConfig {
                decoder_hidden: 512,
                ..d.model
            },
            vlr: StageConfig {
                epochs: 100,
                batch_size: 16,
                lr: 1e-5,
                image_lr: Some(1e-4),
                schedule: Schedule::Milestones { at: vec![50], factor: 0.1 },
                ..StageConfig::default()
            },
            llr: StageConfig {
                epochs: 100,
                batch_size: 64,
                lr: 1e-5,
                schedule: Schedule::Every { period: 20, factor: 0.2 },
                ..StageConfig::default()
            },
            decoder: StageConfig {
                epochs: 100,
                batch_size: 32,
                lr: 3e-4,
                schedule: Schedule::Milestones { at: vec![50], factor: 0.1 },
                ..StageConfig::default()
            },
            ..d
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical serialization, seed included.
    pub fn fingerprint(&self) -> Result<String> {
        let text = self.to_toml()?;
        Ok(Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("corpus.samples", self.corpus.samples),
            ("corpus.dictionary_size", self.corpus.dictionary_size),
            ("model.features", self.model.features),
            ("model.patch_hidden", self.model.patch_hidden),
            ("model.text_hidden", self.model.text_hidden),
            ("model.attention_hidden", self.model.attention_hidden),
            ("model.decoder_hidden", self.model.decoder_hidden),
            ("model.max_report_tokens", self.model.max_report_tokens),
            ("model.max_sentence_tokens", self.model.max_sentence_tokens),
            ("retrieval.reports", self.retrieval.reports),
            ("retrieval.sentences", self.retrieval.sentences),
            ("retrieval.diseases", self.retrieval.diseases),
            ("generation.max_sentences", self.generation.max_sentences),
            ("generation.max_words", self.generation.max_words),
            ("generation.max_flat_words", self.generation.max_flat_words),
            ("vlr.batch_size", self.vlr.batch_size),
            ("llr.batch_size", self.llr.batch_size),
            ("decoder.batch_size", self.decoder.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.retrieval.diseases > self.corpus.world.classes {
            return Err(Error::Config(format!(
                "retrieval.diseases {} exceeds the {} classes",
                self.retrieval.diseases, self.corpus.world.classes
            )));
        }
        for (name, s) in [("vlr", &self.vlr), ("llr", &self.llr), ("decoder", &self.decoder)] {
            if !(s.lr > 0.0) || s.image_lr.is_some_and(|l| !(l > 0.0)) {
                return Err(Error::Config(format!("{name} learning rates must be positive")));
            }
            if !(s.clip > 0.0) || s.weight_decay < 0.0 {
                return Err(Error::Config(format!("{name}.clip must be positive and weight_decay non-negative")));
            }
            if !(0.0..1.0).contains(&s.beta1) || !(0.0..1.0).contains(&s.beta2) {
                return Err(Error::Config(format!("{name} betas must lie in [0, 1)")));
            }
            if let Schedule::Every { period: 0, .. } = s.schedule {
                return Err(Error::Config(format!("{name}.schedule.period must be positive")));
            }
        }
        let [a, b, c] = self.corpus.split;
        if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config("corpus.split must be three fractions summing to 1".into()));
        }
        if self.corpus.world.views == 0 {
            return Err(Error::Config("corpus.world.views must be positive".into()));
        }
        Ok(())
    }
}
