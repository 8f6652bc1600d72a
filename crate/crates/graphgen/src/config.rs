//! Declarative run configuration: one TOML file drives sampling, training
//! and generation. Shipped defaults carry the full-scale experiment values
//! (batch 37, two alternate iterations, 10,000 estimator epochs, conditions
//! 3/4/5 at 300 graphs each); a second shipped file scales everything to
//! desk size.

use crate::graph::FeatureName;
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub count: usize,
    pub size_min: usize,
    pub size_max: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { count: 2000, size_min: 10, size_max: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub embed_dim: usize,
    pub estimator_pre_fc: usize,
    pub estimator_hidden: usize,
    pub kl_weight: f64,
    pub feature_loss_weight: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            latent_dim: 10,
            encoder_hidden: 256,
            decoder_hidden: 256,
            embed_dim: 64,
            estimator_pre_fc: 256,
            estimator_hidden: 512,
            kl_weight: 1.0,
            feature_loss_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub generator_epochs_per_phase: usize,
    pub estimator_epochs_per_phase: usize,
    pub alternate_iterations: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            batch_size: 37,
            generator_epochs_per_phase: 500,
            estimator_epochs_per_phase: 10_000,
            alternate_iterations: 2,
            learning_rate: 1e-3,
            grad_clip: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub conditions: Vec<f64>,
    pub count: usize,
    pub temperature: f64,
    pub retry_factor: usize,
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection {
            conditions: vec![3.0, 4.0, 5.0],
            count: 300,
            temperature: 1.0,
            retry_factor: 20,
        }
    }
}

/// The whole run configuration. Every field has a shipped default, so a
/// sparse file only overrides what it names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub feature_order: Vec<FeatureName>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub generation: GenerationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            feature_order: vec![FeatureName::Aspl],
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            generation: GenerationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.feature_order.is_empty() {
            return Err(ConfigError::Invalid("feature_order must not be empty".to_string()));
        }
        let mut seen = Vec::new();
        for f in &self.feature_order {
            if seen.contains(f) {
                return Err(ConfigError::Invalid(format!("duplicate feature {f}")));
            }
            seen.push(*f);
        }
        if self.dataset.size_min < 2 || self.dataset.size_min > self.dataset.size_max {
            return Err(ConfigError::Invalid(format!(
                "dataset size bounds [{}, {}] are invalid",
                self.dataset.size_min, self.dataset.size_max
            )));
        }
        if self.generation.temperature <= 0.0 {
            return Err(ConfigError::Invalid("temperature must be positive".to_string()));
        }
        Ok(())
    }

    /// Model config with token capacity taken from the manifest.
    pub fn model_config(&self, max_nodes: usize, max_sequence_length: usize) -> ModelConfig {
        ModelConfig {
            latent_dim: self.model.latent_dim,
            encoder_hidden: self.model.encoder_hidden,
            decoder_hidden: self.model.decoder_hidden,
            embed_dim: self.model.embed_dim,
            estimator_pre_fc: self.model.estimator_pre_fc,
            estimator_hidden: self.model.estimator_hidden,
            estimator_out: self.feature_order.len(),
            condition_dim: self.feature_order.len(),
            max_nodes,
            max_sequence_length,
            kl_weight: self.model.kl_weight,
            feature_loss_weight: self.model.feature_loss_weight,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.training.batch_size,
            generator_epochs_per_phase: self.training.generator_epochs_per_phase,
            estimator_epochs_per_phase: self.training.estimator_epochs_per_phase,
            alternate_iterations: self.training.alternate_iterations,
            learning_rate: self.training.learning_rate,
            seed: self.seed,
            feature_loss_weight: self.model.feature_loss_weight,
            grad_clip: self.training.grad_clip,
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
