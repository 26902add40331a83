//! Meta-trains the full model on the near-upright pool and evaluates it on the any-orientation pool.
//!
//! cargo run --release --example train_and_evaluate

use frinet::benchmark::BenchmarkPreset;
use frinet::engine::{evaluate, train, EvalOptions, FeatureBank, TrainConfig, TrainOptions};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let preset = BenchmarkPreset::default();
    let (train_pool, test_pool) = preset.datasets()?;
    let fold = 0;
    let backbone = preset.pretrained_backbone(&train_pool, fold)?;

    let cfg = TrainConfig {
        fold,
        epochs: Some(2),
        steps_per_epoch: Some(150),
        ..preset.train.clone()
    };
    let dir = std::env::temp_dir().join("frinet-example-run");
    let mut opts = TrainOptions {
        checkpoint_dir: Some(dir.clone()),
        ..TrainOptions::default()
    };
    let outcome = train(&train_pool, train_pool.split(fold)?, &cfg, &backbone, &mut opts)?;
    println!("epoch losses {:?}", outcome.epoch_losses);
    println!("checkpoints in {}", dir.display());

    let eval = EvalOptions {
        num_episodes: 300,
        ..preset.eval_options()
    };
    let mut bank = FeatureBank::new();
    let report = evaluate(
        &test_pool,
        test_pool.split(fold)?,
        &cfg,
        &outcome.model,
        &backbone,
        &mut bank,
        &eval,
        None,
    )?;
    println!("{}", report.to_json());
    println!("mIoU {:.2}%", report.miou_percent());
    Ok(())
}
