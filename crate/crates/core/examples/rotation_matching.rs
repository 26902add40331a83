//! Rotation-adaptive matching on one episode without any learnable layers.
//!
//! For each rotated copy of the query, prints how foreground pixels split their
//! strongest relation weight across the support orientations, and the mean weight.
//!
//! cargo run --release --example rotation_matching

use frinet::benchmark::BenchmarkPreset;
use frinet::data::{generate_synthetic_dataset, sample_episode, Phase, Rotation};
use frinet::engine::{episode_inputs, rotated_masks, FeatureBank};
use frinet::rotmatch::{downsample_mask, merge_shots, orientation_prototypes, relation_scores, relation_softmax};

fn main() -> anyhow::Result<()> {
    let preset = BenchmarkPreset::default();
    let test = generate_synthetic_dataset(&preset.test_synthetic)?;
    let fold = 0;
    let backbone = preset.random_backbone(fold);
    let episode = sample_episode(&test, test.split(fold)?, Phase::Test, 1, 6)?;
    println!(
        "target class {} ({})",
        episode.target_class, test.class_names[&episode.target_class]
    );

    let mut bank = FeatureBank::new();
    let inputs = episode_inputs(&episode, &Rotation::ALL, &mut bank, &backbone)?;
    let shots = inputs
        .supports
        .iter()
        .enumerate()
        .map(|(k, shot)| orientation_prototypes(&shot.map(|_, (f, _)| f.clone()), &shot.map(|_, (_, m)| m.clone()), k))
        .collect::<Result<Vec<_>, _>>()?;
    let prototypes = merge_shots(&shots)?;

    let query_masks = rotated_masks(&episode.query.mask, &Rotation::ALL);
    println!(
        "query      {}",
        Rotation::ALL
            .map(|r| format!("{:>6}", format!("P{}", r.degrees())))
            .join("")
    );
    for (r, features) in inputs.queries.iter() {
        let relations = relation_softmax(&relation_scores(features, &prototypes)?);
        let fg = downsample_mask(query_masks.get(r).unwrap(), (features.height(), features.width()));
        let count = fg.iter().filter(|&&v| v == 1).count().max(1) as f32;
        let mut wins = [0usize; 4];
        let mut sums = [0f32; 4];
        for ((y, x), _) in fg.indexed_iter().filter(|(_, &m)| m == 1) {
            let lane = relations.weights.slice(ndarray::s![.., y, x]);
            for (o, &w) in lane.iter().enumerate() {
                sums[o] += w;
            }
            let best = (0..4).max_by(|&a, &b| lane[a].total_cmp(&lane[b])).unwrap();
            wins[best] += 1;
        }
        let share: Vec<String> = wins.iter().map(|&n| format!("{:>6.2}", n as f32 / count)).collect();
        let mean: Vec<String> = sums.iter().map(|&s| format!("{:>8.5}", s / count)).collect();
        println!("rot {:>3}  {}   mean {}", r.degrees(), share.join(""), mean.join(""));
    }
    Ok(())
}
