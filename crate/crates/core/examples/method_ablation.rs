//! Baseline, rotation augmentation and the full method on the same episodes.
//!
//! cargo run --release --example method_ablation -- 150

use frinet::benchmark::BenchmarkPreset;
use frinet::engine::{EvalOptions, TrainConfig};
use frinet::evaluation::{compare_harness, CompareMode, HarnessData, SharedSetup};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(150);
    let preset = BenchmarkPreset::default();
    let (train, test) = preset.datasets()?;
    let backbone = preset.pretrained_backbone(&train, 0)?;
    let shared = SharedSetup {
        base: TrainConfig {
            epochs: Some(2),
            steps_per_epoch: Some(steps),
            ..preset.train.clone()
        },
        folds: vec![0],
        seeds: vec![0],
        eval: EvalOptions {
            num_episodes: 300,
            ..preset.eval_options()
        },
    };
    let report = compare_harness(
        CompareMode::MethodAblation,
        HarnessData {
            train: &train,
            test: &test,
        },
        &shared,
        |_| Ok(&backbone),
    )?;
    println!("{}", report.to_markdown());
    Ok(())
}
