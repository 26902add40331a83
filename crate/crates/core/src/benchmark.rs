//! The synthetic oriented-shapes benchmark used by `compare` and the acceptance suite.
//!
//! Meta-training draws from a pool of near-upright objects; evaluation draws from a
//! separately generated pool whose objects take any orientation.

use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain_on_base, PretrainConfig, ToyBackbone, ToyBackboneConfig};
use crate::data::{generate_synthetic_dataset, Dataset, SyntheticConfig};
use crate::engine::{EvalOptions, TrainConfig};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPreset {
    pub synthetic: SyntheticConfig,
    pub test_synthetic: SyntheticConfig,
    pub backbone: ToyBackboneConfig,
    /// Backbone init seed is `backbone_seed + fold`.
    pub backbone_seed: u64,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval_episodes: usize,
    pub eval_seed: u64,
}

impl Default for BenchmarkPreset {
    fn default() -> Self {
        let synthetic = SyntheticConfig {
            num_images: 300,
            orientation_range: (-30.0, 30.0),
            objects_per_image: (2, 2),
            object_scale: (0.25, 0.35),
            ..SyntheticConfig::default()
        };
        let test_synthetic = SyntheticConfig {
            num_images: 200,
            rng_seed: 1,
            orientation_range: (0.0, 360.0),
            ..synthetic.clone()
        };
        BenchmarkPreset {
            test_synthetic,
            backbone: ToyBackboneConfig {
                widths: [16, 32, 32, 32],
                padded: true,
            },
            backbone_seed: 100,
            pretrain: PretrainConfig::default(),
            train: TrainConfig {
                learning_rate: 0.01,
                epochs: Some(4),
                steps_per_epoch: Some(750),
                head_width: 16,
                input_size: synthetic.image_size,
                ..TrainConfig::default()
            },
            synthetic,
            eval_episodes: 1000,
            eval_seed: 99,
        }
    }
}

impl BenchmarkPreset {
    /// `(train pool, test pool)`.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        Ok((
            generate_synthetic_dataset(&self.synthetic)?,
            generate_synthetic_dataset(&self.test_synthetic)?,
        ))
    }

    pub fn random_backbone(&self, fold: usize) -> ToyBackbone<f32> {
        ToyBackbone::random(self.backbone.clone(), self.backbone_seed + fold as u64)
    }

    /// Random backbone for `fold`, pretrained on that fold's base classes of `train`.
    pub fn pretrained_backbone(&self, train: &Dataset, fold: usize) -> Result<ToyBackbone<f32>> {
        let mut bb = self.random_backbone(fold);
        let cfg = PretrainConfig {
            seed: self.pretrain.seed + fold as u64,
            ..self.pretrain.clone()
        };
        let outcome = pretrain_on_base(&mut bb, train, train.split(fold)?, &cfg)?;
        log::info!(
            "pretrained fold {fold} backbone: pixel accuracy {:.3} over {} images",
            outcome.pixel_accuracy,
            outcome.images_used
        );
        Ok(bb)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            num_episodes: self.eval_episodes,
            seed: self.eval_seed,
            ..EvalOptions::default()
        }
    }
}
