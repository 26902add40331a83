//! Episodic meta-training, inference and checkpoints.

mod bank;
mod checkpoint;
mod config;
mod model;

use std::path::PathBuf;

use log::{debug, info};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use bank::{episode_inputs, rotated_masks, FeatureBank};
pub use checkpoint::{Checkpoint, MetricEntry, RngState};
pub use config::TrainConfig;
pub use model::{losses, EpisodeInputs, ForwardCache, ForwardOutput, FrinetModel};

use crate::backbone::{BackboneSpec, ToyBackbone};
use crate::data::{
    flip_sample, rotate_sample, Dataset, Episode, EpisodeSampler, ImageSample, Phase, Rotation, SplitConfig,
};
use crate::error::{FrinetError, Result};
use crate::evaluation::{ConfusionAccumulator, EvalReport, IouMode};
use crate::nn::Sgd;
use crate::rothead::predict_mask;

pub const TRAIN_STREAM: u64 = 2;
pub const EVAL_STREAM: u64 = 3;
/// Training aborts once any episode's composite loss exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e3;
pub const DEFAULT_EVAL_EPISODES: usize = 1000;

/// Optional extras for [`train`].
#[derive(Debug, Default)]
pub struct TrainOptions {
    pub backbone_spec: Option<BackboneSpec>,
    /// When set, `epoch_NNN.safetensors` and `last.safetensors` are written here after each epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Recorded in checkpoints so evaluation can find the data again.
    pub dataset_uri: Option<PathBuf>,
    pub bank: FeatureBank,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: FrinetModel<f32>,
    pub checkpoint: Checkpoint,
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

impl TrainConfig {
    /// Optimizer steps per epoch for a dataset of `dataset_size` items.
    pub fn steps_for(&self, dataset_size: usize) -> usize {
        self.steps_per_epoch.unwrap_or((dataset_size / self.batch_size).max(1))
    }
}

/// Poly decay `lr0 · (1 − step/total)^power`.
pub fn poly_lr(lr0: f64, step: usize, total: usize, power: f64) -> f64 {
    lr0 * (1.0 - step as f64 / total as f64).max(0.0).powf(power)
}

fn augment(sample: &ImageSample, config: &TrainConfig, rng: &mut ChaCha8Rng) -> ImageSample {
    let flip = rng.random_bool(0.5);
    let turns = rng.random_range(0..4i64);
    let mut s = if config.flip_augment && flip {
        flip_sample(sample)
    } else {
        sample.clone()
    };
    if config.rotation_augment {
        s = rotate_sample(&s, Rotation::from_quarter_turns(turns));
    }
    s
}

fn augment_episode(episode: &Episode, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Episode {
    Episode {
        supports: episode.supports.iter().map(|s| augment(s, config, rng)).collect(),
        query: augment(&episode.query, config, rng),
        ..episode.clone()
    }
}

/// Episodic SGD on the base classes of `split` with the backbone frozen.
pub fn train(
    dataset: &Dataset,
    split: &SplitConfig,
    config: &TrainConfig,
    backbone: &ToyBackbone<f32>,
    options: &mut TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if backbone.channels() == 0 || !backbone.is_loaded() {
        return Err(FrinetError::WeightsNotLoaded);
    }
    let backbone_checksum = backbone.weight_checksum();
    let sampler = EpisodeSampler::new(dataset, split, Phase::Train, config.shots)?;
    let mut model = FrinetModel::<f32>::new(
        backbone.channels(),
        config.head_width,
        &config.orientations,
        config.seed,
    );
    let sgd = Sgd {
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TRAIN_STREAM);

    let epochs = config.epochs();
    let steps = config.steps_for(dataset.len());
    let total = epochs * steps;
    info!(
        "training fold {} {}-shot: {epochs} epochs x {steps} steps x {} episodes, orientations {:?}, mu {}",
        split.fold, config.shots, config.batch_size, config.orientations, config.mu
    );
    let mut step_losses = Vec::with_capacity(total);
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut metric_log = Vec::new();
    let mut last_good: Option<Checkpoint> = None;
    for epoch in 1..=epochs {
        let mut epoch_sum = 0.0;
        for step in 0..steps {
            let lr = poly_lr(
                config.learning_rate,
                (epoch - 1) * steps + step,
                total,
                config.poly_power,
            );
            let mut batch_sum = 0.0;
            for _ in 0..config.batch_size {
                let episode = augment_episode(&sampler.sample(&mut rng), config, &mut rng);
                let inputs = episode_inputs(&episode, &config.orientations, &mut options.bank, backbone)?;
                let bundle = model.accumulate_gradients(&inputs, &episode.query.mask, config.mu)?;
                if bundle.loss_all.is_nan() || bundle.loss_all > DIVERGENCE_LIMIT {
                    return Err(FrinetError::Diverged {
                        epoch,
                        loss: bundle.loss_all,
                        last_good: last_good.map(Box::new),
                    });
                }
                batch_sum += bundle.loss_all;
            }
            sgd.step(&mut model, lr, 1.0 / config.batch_size as f64);
            let loss = batch_sum / config.batch_size as f64;
            debug!("epoch {epoch} step {step} lr {lr:.6} loss {loss:.5}");
            step_losses.push(loss);
            epoch_sum += loss;
        }
        let loss = epoch_sum / steps as f64;
        info!("epoch {epoch}/{epochs}: loss_all {loss:.5}");
        epoch_losses.push(loss);
        metric_log.push(MetricEntry {
            epoch,
            loss,
            miou: None,
        });
        let mut ckpt = Checkpoint::capture(
            &model,
            config,
            options.backbone_spec.clone(),
            backbone_checksum.clone(),
            epoch,
            RngState::capture(config.seed, &rng),
            metric_log.clone(),
        );
        ckpt.dataset = options.dataset_uri.clone();
        if let Some(dir) = &options.checkpoint_dir {
            ckpt.save(&dir.join(format!("epoch_{epoch:03}.safetensors")))?;
            ckpt.save(&dir.join("last.safetensors"))?;
        }
        last_good = Some(ckpt);
    }
    let checkpoint = last_good.unwrap_or_else(|| {
        Checkpoint::capture(
            &model,
            config,
            options.backbone_spec.clone(),
            backbone_checksum.clone(),
            0,
            RngState::capture(config.seed, &rng),
            Vec::new(),
        )
    });
    if backbone.weight_checksum() != backbone_checksum {
        return Err(FrinetError::BackboneMismatch {
            expected: backbone_checksum,
            found: backbone.weight_checksum(),
        });
    }
    Ok(TrainOutcome {
        model,
        checkpoint,
        step_losses,
        epoch_losses,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub num_episodes: usize,
    pub seed: u64,
    pub iou_mode: IouMode,
    /// Overrides the checkpoint's shot count.
    pub shots: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            num_episodes: DEFAULT_EVAL_EPISODES,
            seed: 0,
            iou_mode: IouMode::Pooled,
            shots: None,
        }
    }
}

/// Everything an observer sees for one evaluation episode.
pub struct EvalEpisode<'a> {
    pub index: usize,
    pub episode: &'a Episode,
    pub output: &'a ForwardOutput<f32>,
    pub prediction: &'a Array2<u8>,
}

/// Callback invoked by [`evaluate`] after every episode.
pub type EpisodeObserver<'o> = dyn FnMut(EvalEpisode<'_>) -> Result<()> + 'o;

/// Hash of the evaluation episode list (target class and item ids, in order).
#[derive(Debug, Default, Clone)]
pub struct EpisodeDigest(Sha256);

impl EpisodeDigest {
    pub fn push(&mut self, episode: &Episode) {
        self.0.update([episode.target_class]);
        for id in episode.item_ids() {
            self.0.update(id.map_or(u64::MAX, |i| i as u64).to_le_bytes());
        }
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// The deterministic list of test episodes for a seed.
pub fn eval_episodes(
    dataset: &Dataset,
    split: &SplitConfig,
    shots: usize,
    num_episodes: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let sampler = EpisodeSampler::new(dataset, split, Phase::Test, shots)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    Ok((0..num_episodes).map(|_| sampler.sample(&mut rng)).collect())
}

/// Novel-class evaluation of `model`; `observer` sees every episode's output.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    dataset: &Dataset,
    split: &SplitConfig,
    config: &TrainConfig,
    model: &FrinetModel<f32>,
    backbone: &ToyBackbone<f32>,
    bank: &mut FeatureBank,
    options: &EvalOptions,
    mut observer: Option<&mut EpisodeObserver<'_>>,
) -> Result<EvalReport> {
    let shots = options.shots.unwrap_or(config.shots);
    if options.num_episodes == 0 {
        return Ok(EvalReport::empty(split.fold, shots, config.digest(), options.iou_mode));
    }
    let sampler = EpisodeSampler::new(dataset, split, Phase::Test, shots)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    rng.set_stream(EVAL_STREAM);
    let mut acc = ConfusionAccumulator::new();
    let mut digest = EpisodeDigest::default();
    for index in 0..options.num_episodes {
        let episode = sampler.sample(&mut rng);
        digest.push(&episode);
        let inputs = episode_inputs(&episode, &model.orientations, bank, backbone)?;
        let output = model.infer(&inputs)?;
        let prediction = predict_mask(&output.fused);
        acc.accumulate(&prediction, &episode.query.mask, episode.target_class)?;
        if let Some(obs) = observer.as_mut() {
            obs(EvalEpisode {
                index,
                episode: &episode,
                output: &output,
                prediction: &prediction,
            })?;
        }
    }
    EvalReport::from_accumulator(
        &acc,
        options.iou_mode,
        split.fold,
        shots,
        options.num_episodes,
        config.digest(),
        digest.finish(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ToyBackboneConfig;
    use crate::data::{generate_synthetic_dataset, SyntheticConfig};

    fn setup() -> (Dataset, SplitConfig, ToyBackbone<f32>) {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            num_images: 48,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let split = ds.split(0).unwrap().clone();
        let bb = ToyBackbone::random(
            ToyBackboneConfig {
                widths: [8, 8, 16, 16],
                padded: true,
            },
            5,
        );
        (ds, split, bb)
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: Some(3),
            steps_per_epoch: Some(3),
            batch_size: 2,
            head_width: 8,
            learning_rate: 0.02,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0.01, 0, 10, 0.9), 0.01);
        assert!(poly_lr(0.01, 9, 10, 0.9) < 0.002);
        assert_eq!(poly_lr(0.01, 10, 10, 0.9), 0.0);
    }

    #[test]
    fn training_is_deterministic_and_leaves_backbone_untouched() {
        let (ds, split, bb) = setup();
        let before = bb.weight_checksum();
        let a = train(&ds, &split, &tiny_config(), &bb, &mut TrainOptions::default()).unwrap();
        let b = train(&ds, &split, &tiny_config(), &bb, &mut TrainOptions::default()).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(a.checkpoint.params_checksum(), b.checkpoint.params_checksum());
        assert_eq!(bb.weight_checksum(), before);
        assert_eq!(a.epoch_losses.len(), 3);
        assert_eq!(a.checkpoint.metric_log.len(), 3);
    }

    #[test]
    fn divergence_guard_returns_last_good_checkpoint() {
        let (ds, split, bb) = setup();
        let cfg = TrainConfig {
            learning_rate: 1e6,
            ..tiny_config()
        };
        match train(&ds, &split, &cfg, &bb, &mut TrainOptions::default()) {
            Err(FrinetError::Diverged { epoch, .. }) => assert!(epoch >= 1),
            Err(FrinetError::NonFinite(stage)) => assert!(!stage.is_empty()),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.epoch_losses)),
        }
    }

    #[test]
    fn zero_episodes_gives_flagged_report_and_eval_is_repeatable() {
        let (ds, split, bb) = setup();
        let cfg = tiny_config();
        let model = FrinetModel::new(bb.channels(), cfg.head_width, &cfg.orientations, 0);
        let mut bank = FeatureBank::new();
        let empty = EvalOptions {
            num_episodes: 0,
            ..EvalOptions::default()
        };
        let r = evaluate(&ds, &split, &cfg, &model, &bb, &mut bank, &empty, None).unwrap();
        assert_eq!(r.status, crate::evaluation::STATUS_NO_EPISODES);
        let opts = EvalOptions {
            num_episodes: 6,
            seed: 4,
            ..EvalOptions::default()
        };
        let mut seen = 0;
        let mut count = |_: EvalEpisode<'_>| {
            seen += 1;
            Ok(())
        };
        let a = evaluate(&ds, &split, &cfg, &model, &bb, &mut bank, &opts, Some(&mut count)).unwrap();
        let b = evaluate(&ds, &split, &cfg, &model, &bb, &mut FeatureBank::new(), &opts, None).unwrap();
        assert_eq!(seen, 6);
        assert_eq!(a.to_json(), b.to_json());
        assert!((0.0..=1.0).contains(&a.miou));
        let mut d = EpisodeDigest::default();
        for e in eval_episodes(&ds, &split, cfg.shots, 6, 4).unwrap() {
            d.push(&e);
        }
        assert_eq!(d.finish(), a.episode_digest);
    }
}
