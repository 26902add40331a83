//! Pretrains the toy extractor on one fold's base classes, saves it frozen and reloads it.
//!
//! cargo run --release --example pretrain_backbone -- 0

use frinet::backbone::{load_backbone, pretrain_on_base, probe_feature_hash, save_backbone, PretrainConfig};
use frinet::benchmark::BenchmarkPreset;
use frinet::data::generate_synthetic_dataset;

fn main() -> anyhow::Result<()> {
    let fold: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let preset = BenchmarkPreset::default();
    let train = generate_synthetic_dataset(&preset.synthetic)?;
    let split = train.split(fold)?;
    println!(
        "fold {fold}: base classes {:?}, novel classes {:?}",
        split.base_classes, split.novel_classes
    );

    let mut backbone = preset.random_backbone(fold);
    let cfg = PretrainConfig {
        epochs: 2,
        ..preset.pretrain.clone()
    };
    let outcome = pretrain_on_base(&mut backbone, &train, split, &cfg)?;
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch {} loss {loss:.4}", epoch + 1);
    }
    println!(
        "pixel accuracy {:.3} over {} images",
        outcome.pixel_accuracy, outcome.images_used
    );

    let dir = std::env::temp_dir().join("frinet-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("backbone_fold{fold}.safetensors"));
    let spec = save_backbone(&backbone, &path, Some(fold), Some(outcome.pixel_accuracy))?;
    let reloaded = load_backbone(&spec)?;
    println!(
        "saved {} ({} channels, stride {})",
        path.display(),
        spec.channels,
        spec.stride
    );
    println!("probe hash before {}", probe_feature_hash(&backbone)?);
    println!("probe hash after  {}", probe_feature_hash(&reloaded)?);
    Ok(())
}
