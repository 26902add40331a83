//! Short training run on a pretrained backbone, checkpoint reload, then PNG visuals of the first few test episodes.
//!
//! cargo run --release --example render_visuals -- /tmp/frinet-visuals

use std::path::PathBuf;

use frinet::benchmark::BenchmarkPreset;
use frinet::engine::{evaluate, train, Checkpoint, EvalEpisode, EvalOptions, FeatureBank, TrainConfig, TrainOptions};
use frinet::evaluation::render_visuals;
use frinet::store::params_checksum;

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("frinet-visuals"));
    let preset = BenchmarkPreset::default();
    let (train_pool, test_pool) = preset.datasets()?;
    let fold = 1;
    let backbone = preset.pretrained_backbone(&train_pool, fold)?;
    let cfg = TrainConfig {
        fold,
        epochs: Some(2),
        steps_per_epoch: Some(150),
        ..preset.train.clone()
    };
    let mut opts = TrainOptions {
        checkpoint_dir: Some(out.join("run")),
        ..TrainOptions::default()
    };
    let trained = train(&train_pool, train_pool.split(fold)?, &cfg, &backbone, &mut opts)?.model;

    let checkpoint = Checkpoint::load(&out.join("run").join("last.safetensors"))?;
    let model = checkpoint.to_model()?;
    println!(
        "reloaded epoch {} checkpoint, params {}",
        checkpoint.epoch,
        checkpoint.params_checksum()
    );
    assert_eq!(params_checksum(&trained), checkpoint.params_checksum());

    let eval = EvalOptions {
        num_episodes: 4,
        ..preset.eval_options()
    };
    let mut bank = FeatureBank::new();
    let mut observer = |ep: EvalEpisode<'_>| -> frinet::error::Result<()> {
        let dir = out.join(format!("episode{}", ep.index));
        for path in render_visuals(ep.episode, ep.output, ep.prediction, &dir)? {
            println!("wrote {}", path.display());
        }
        Ok(())
    };
    let report = evaluate(
        &test_pool,
        test_pool.split(fold)?,
        &cfg,
        &model,
        &backbone,
        &mut bank,
        &eval,
        Some(&mut observer),
    )?;
    println!(
        "mIoU over {} episodes: {:.2}%",
        report.num_episodes,
        report.miou_percent()
    );
    Ok(())
}
