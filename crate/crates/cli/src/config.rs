//! Run configuration: everything needed to reproduce a run directory.

use std::path::PathBuf;

use clalab::model::ModelConfig;
use clalab::objectives::{Objective, TrainConfig};
use clalab::steering::DEFAULT_GAMMA;
use clalab::worldgen::WorldSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Model shape; the vocabulary size comes from the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let r = ModelConfig::reference(1, 0);
        Self { n_layers: r.n_layers, d_model: r.d_model, n_heads: r.n_heads, d_ff: r.d_ff, max_seq_len: r.max_seq_len }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringDefaults {
    pub gamma: f64,
    pub en_layer: usize,
    pub loc_layer: usize,
}

impl Default for SteeringDefaults {
    fn default() -> Self {
        // Depth-rescaled from layers 20 and 28 of a 48-layer model.
        Self { gamma: DEFAULT_GAMMA, en_layer: 5, loc_layer: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Global seed; world, init and batching draw named streams from it.
    pub seed: u64,
    pub world: WorldSpec,
    pub model: ModelShape,
    /// Language-model pretraining that produces the unaligned base.
    pub pretrain: TrainConfig,
    /// Post-training objective applied to the base.
    pub train: TrainConfig,
    pub steering: SteeringDefaults,
    pub sweep_layers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 42;
        let model = ModelShape::default();
        Self {
            seed,
            world: WorldSpec::default(),
            pretrain: TrainConfig { objective: Objective::Pretrain, lr: 0.05, epochs: 100, ..TrainConfig::default() },
            train: TrainConfig { objective: Objective::Clo, lr: 0.05, epochs: 10, ..TrainConfig::default() },
            steering: SteeringDefaults::default(),
            sweep_layers: (1..=model.n_layers).collect(),
            model,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Propagates `seed` to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.world.seed = seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            n_layers: self.model.n_layers,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            max_seq_len: self.model.max_seq_len,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.world.validate()?;
        self.model_config(1).validate()?;
        let n = self.model.n_layers;
        self.pretrain.validate(n)?;
        self.train.validate(n)?;
        for (name, l) in [("en_layer", self.steering.en_layer), ("loc_layer", self.steering.loc_layer)] {
            if l == 0 || l > n {
                return Err(CliError::Data(format!("steering {name} {l} outside 1..={n}")));
            }
        }
        if let Some(l) = self.sweep_layers.iter().find(|&&l| l == 0 || l > n) {
            return Err(CliError::Data(format!("sweep layer {l} outside 1..={n}")));
        }
        if !self.steering.gamma.is_finite() {
            return Err(CliError::Data("steering gamma must be finite".into()));
        }
        Ok(())
    }
}
