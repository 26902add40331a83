//! Generates the two benchmark pools, prints per-class statistics and writes the training pool to disk.
//!
//! cargo run --release --example synthetic_benchmark -- /tmp/frinet-data

use std::path::PathBuf;

use frinet::benchmark::BenchmarkPreset;
use frinet::data::save_dataset;

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("frinet-data"));
    let preset = BenchmarkPreset::default();
    let (train, test) = preset.datasets()?;
    for (name, ds, cfg) in [
        ("train", &train, &preset.synthetic),
        ("test", &test, &preset.test_synthetic),
    ] {
        println!(
            "{name} pool: {} images, orientations {:?} deg, {} classes",
            ds.len(),
            cfg.orientation_range,
            ds.class_names.len()
        );
        for (id, label) in &ds.class_names {
            println!(
                "  class {id:>2} {label:<10} in {:>3} images",
                ds.images_with_class(*id).len()
            );
        }
    }
    for split in &train.splits {
        println!(
            "fold {}: novel {:?}, base {:?}",
            split.fold, split.novel_classes, split.base_classes
        );
    }
    save_dataset(&train, &out)?;
    println!("wrote training pool to {}", out.display());
    Ok(())
}
