use std::sync::OnceLock;

use frinet::backbone::{ToyBackbone, ToyBackboneConfig};
use frinet::data::{generate_synthetic_dataset, sample_episode, Dataset, Phase, Rotation, SyntheticConfig};
use frinet::engine::{episode_inputs, FeatureBank, FrinetModel};
use proptest::prelude::*;

fn dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        generate_synthetic_dataset(&SyntheticConfig {
            num_images: 40,
            image_size: 64,
            ..SyntheticConfig::default()
        })
        .unwrap()
    })
}

fn backbone() -> &'static ToyBackbone<f32> {
    static BB: OnceLock<ToyBackbone<f32>> = OnceLock::new();
    BB.get_or_init(|| {
        ToyBackbone::random(
            ToyBackboneConfig {
                widths: [8, 8, 8, 8],
                padded: true,
            },
            1,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampled_episodes_respect_their_split(seed in any::<u64>(), fold in 0usize..3, shots in 1usize..5, train in any::<bool>()) {
        let ds = dataset();
        let split = ds.split(fold).unwrap();
        let phase = if train { Phase::Train } else { Phase::Test };
        let episode = sample_episode(ds, split, phase, shots, seed).unwrap();
        let allowed = if train { &split.base_classes } else { &split.novel_classes };
        prop_assert!(allowed.contains(&episode.target_class));
        prop_assert_eq!(episode.supports.len(), shots);
        for sample in episode.supports.iter().chain([&episode.query]) {
            prop_assert!(sample.mask.iter().all(|&m| m <= 1 || m == 255));
            prop_assert!(sample.mask.iter().any(|&m| m == 1));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fresh_model_fuses_by_averaging_and_relations_are_stochastic(seed in any::<u64>(), init in any::<u64>()) {
        let ds = dataset();
        let episode = sample_episode(ds, ds.split(0).unwrap(), Phase::Test, 1, seed).unwrap();
        let mut bank = FeatureBank::new();
        let inputs = episode_inputs(&episode, &Rotation::ALL, &mut bank, backbone()).unwrap();
        let model = FrinetModel::<f32>::new(backbone().channels(), 8, &Rotation::ALL, init);
        let out = model.infer(&inputs).unwrap();

        let mut mean = out.fused.data.clone() * 0.0;
        for branch in out.branches.values() {
            mean += &(&branch.data / 4.0);
        }
        let err = (&mean - &out.fused.data).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        prop_assert!(err < 1e-5, "fused differs from branch mean by {}", err);

        for relations in out.relations.values() {
            for lane in relations.weights.lanes(ndarray::Axis(0)) {
                prop_assert!(lane.iter().all(|&w| w >= 0.0));
                prop_assert!((lane.sum() - 1.0).abs() < 1e-6);
            }
        }
    }
}
