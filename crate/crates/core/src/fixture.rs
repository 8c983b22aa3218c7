//! The small synthetic setting the model is expected to fit, shared by the
//! acceptance suite and the command-line `overfit` preset.

use crate::data::{synthesize_dataset, SyntheticSpec, VideoRecord};
use crate::error::Result;
use crate::matching::LossWeights;
use crate::model::ModelConfig;
use crate::nn::EvalNorm;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub data: SyntheticSpec,
    /// Per-video seed of the held-out split; prototypes are shared.
    pub test_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Fixture {
    pub fn train_split(&self) -> Result<Vec<VideoRecord>> {
        synthesize_dataset(&self.data)
    }

    pub fn test_split(&self) -> Result<Vec<VideoRecord>> {
        synthesize_dataset(&SyntheticSpec {
            seed: self.test_seed,
            ..self.data.clone()
        })
    }
}

/// Twenty 16-chunk videos with up to five instances of three classes.
pub fn overfit() -> Fixture {
    let data = SyntheticSpec {
        num_videos: 20,
        input_dim: 16,
        num_classes: 3,
        chunks: (16, 16),
        instances: (1, 5),
        instance_chunks: (2, 5),
        noise: 0.1,
        seed: 1,
        prototype_seed: 7,
        ..SyntheticSpec::default()
    };
    let model = ModelConfig {
        input_dim: data.input_dim,
        model_dim: 32,
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 4,
        num_queries: 6,
        max_positions: 16,
        num_classes: data.num_classes,
        dropout: 0.0,
        ffn_dim: 64,
        leaky_slope: 0.01,
        eval_norm: EvalNorm::Graph,
        branch_gain: 0.3,
    };
    let train = TrainConfig {
        learning_rate: 1e-4,
        total_steps: 5000,
        decay_step: 3500,
        batch_size: 4,
        repeat: 1,
        loss: LossWeights {
            no_action: 0.1,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    };
    Fixture {
        data,
        test_seed: 2,
        model,
        train,
    }
}

/// Four-position model with its matching corpus, sized for gradient checks
/// and smoke runs.
pub fn toy() -> Fixture {
    let data = SyntheticSpec {
        num_videos: 4,
        input_dim: 6,
        num_classes: 3,
        chunks: (4, 6),
        instances: (1, 2),
        instance_chunks: (1, 2),
        ..SyntheticSpec::default()
    };
    let model = ModelConfig {
        input_dim: data.input_dim,
        model_dim: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        num_queries: 5,
        max_positions: 4,
        num_classes: data.num_classes,
        dropout: 0.0,
        ffn_dim: 8,
        leaky_slope: 0.01,
        eval_norm: EvalNorm::Running,
        branch_gain: 1.0,
    };
    let train = TrainConfig {
        total_steps: 20,
        decay_step: 15,
        batch_size: 2,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    Fixture {
        data,
        test_seed: 1,
        model,
        train,
    }
}
