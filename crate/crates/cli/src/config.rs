//! JSON configuration file: the single source of truth for an experiment.
//!
//! Every field has a default, so a config file only needs the fields it
//! overrides. All randomness flows from the named seeds here; nothing reads
//! the wall clock.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tokenmark::evalkit::EvalConfig;
use tokenmark::generators::{GeneratorKind, GeneratorNet, DEFAULT_HIDDEN};
use tokenmark::lm::ModelSpec;
use tokenmark::partition::PartitionKey;
use tokenmark::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KeySection {
    pub global_key: u64,
    /// Published in sidecar metadata instead of the key value.
    pub key_id: String,
}

impl Default for KeySection {
    fn default() -> Self {
        Self { global_key: 0xC0FFEED00D, key_id: "default-key".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSection {
    pub hidden_dim: usize,
    pub init_gamma: f64,
    pub init_delta: f64,
    pub init_seed: u64,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self { hidden_dim: DEFAULT_HIDDEN, init_gamma: 0.25, init_delta: 1.25, init_seed: 7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSection {
    pub gen_len: usize,
    pub prompt_len: usize,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self { gen_len: 200, prompt_len: 20 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub n_train_prompts: usize,
    #[serde(flatten)]
    pub config: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { n_train_prompts: 640, config: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionSection {
    pub threshold: f64,
    /// Sliding-window size; absent means full-text detection.
    pub window: Option<usize>,
}

impl Default for DetectionSection {
    fn default() -> Self {
        Self { threshold: 4.0, window: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelSpec,
    pub key: KeySection,
    pub generators: GeneratorSection,
    pub generation: GenerationSection,
    pub training: TrainSection,
    pub evaluation: EvalConfig,
    pub detection: DetectionSection,
    /// Root seed for corpus and prompt synthesis.
    pub corpus_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            key: KeySection::default(),
            generators: GeneratorSection::default(),
            generation: GenerationSection::default(),
            training: TrainSection::default(),
            evaluation: EvalConfig::default(),
            detection: DetectionSection::default(),
            corpus_seed: 1000,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn key(&self) -> PartitionKey {
        PartitionKey::new(self.key.global_key)
    }

    /// Constant-start generator pair from the config's initialization.
    pub fn init_nets(&self) -> Result<(GeneratorNet, GeneratorNet)> {
        let g = GeneratorNet::init_to_constant(
            GeneratorKind::Gamma,
            self.generators.init_gamma,
            self.generators.init_seed,
            self.model.embed_dim,
            self.generators.hidden_dim,
        )?;
        let d = GeneratorNet::init_to_constant(
            GeneratorKind::Delta,
            self.generators.init_delta,
            self.generators.init_seed.wrapping_add(1),
            self.model.embed_dim,
            self.generators.hidden_dim,
        )?;
        Ok((g, d))
    }
}
