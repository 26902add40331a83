use std::collections::HashMap;

use ndarray::Array2;

use crate::backbone::{FeatureMap, ToyBackbone};
use crate::data::{rotate, rotate_sample, Episode, ImageSample, OrientationSet, Rotation, SampleOrigin};
use crate::error::Result;

use super::model::EpisodeInputs;

/// Memoized frozen features keyed by how each image was derived from its dataset item.
///
/// Valid only for one backbone; the bank remembers that backbone's checksum.
#[derive(Debug, Default)]
pub struct FeatureBank {
    backbone_checksum: Option<String>,
    features: HashMap<SampleOrigin, FeatureMap<f32>>,
    hits: usize,
    misses: usize,
}

impl FeatureBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn stats(&self) -> (usize, usize) {
        (self.hits, self.misses)
    }

    /// Drops cached features when `backbone` differs from the one that filled the bank.
    pub fn bind(&mut self, backbone: &ToyBackbone<f32>) {
        let sum = backbone.weight_checksum();
        if self.backbone_checksum.as_deref() != Some(sum.as_str()) {
            self.features.clear();
            self.backbone_checksum = Some(sum);
        }
    }

    /// Features of `sample`, extracted on first use. Samples without an origin are never cached.
    pub fn features(&mut self, backbone: &ToyBackbone<f32>, sample: &ImageSample) -> Result<FeatureMap<f32>> {
        let Some(origin) = sample.origin else {
            return backbone.extract_features(&sample.image);
        };
        if let Some(f) = self.features.get(&origin) {
            self.hits += 1;
            return Ok(f.clone());
        }
        self.misses += 1;
        let f = backbone.extract_features(&sample.image)?;
        self.features.insert(origin, f.clone());
        Ok(f)
    }
}

fn rotated_views(sample: &ImageSample, orientations: &[Rotation]) -> Vec<(Rotation, ImageSample)> {
    orientations.iter().map(|&r| (r, rotate_sample(sample, r))).collect()
}

/// Rotates every image of `episode` by each orientation and gathers frozen features.
pub fn episode_inputs(
    episode: &Episode,
    orientations: &[Rotation],
    bank: &mut FeatureBank,
    backbone: &ToyBackbone<f32>,
) -> Result<EpisodeInputs<f32>> {
    bank.bind(backbone);
    let mut supports = Vec::with_capacity(episode.supports.len());
    for s in &episode.supports {
        let mut entries = Vec::with_capacity(orientations.len());
        for (r, view) in rotated_views(s, orientations) {
            let f = bank.features(backbone, &view)?;
            entries.push((r, (f, view.mask)));
        }
        supports.push(OrientationSet::from_entries(entries));
    }
    let mut queries = Vec::with_capacity(orientations.len());
    for (r, view) in rotated_views(&episode.query, orientations) {
        queries.push((r, bank.features(backbone, &view)?));
    }
    Ok(EpisodeInputs {
        supports,
        queries: OrientationSet::from_entries(queries),
        query_hw: (episode.query.height(), episode.query.width()),
    })
}

/// Rotates a mask into every orientation frame.
pub fn rotated_masks(mask: &Array2<u8>, orientations: &[Rotation]) -> OrientationSet<Array2<u8>> {
    OrientationSet::from_rotations(orientations, |r| rotate(mask.view(), r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ToyBackboneConfig;
    use crate::data::{generate_synthetic_dataset, sample_episode, Phase, SyntheticConfig};

    #[test]
    fn bank_reuses_and_matches_direct_extraction() {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            num_images: 40,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let split = ds.split(0).unwrap().clone();
        let ep = sample_episode(&ds, &split, Phase::Train, 1, 4).unwrap();
        let bb = ToyBackbone::random(ToyBackboneConfig::default(), 2);
        let mut bank = FeatureBank::new();
        let a = episode_inputs(&ep, &Rotation::ALL, &mut bank, &bb).unwrap();
        assert_eq!(bank.stats(), (0, 8));
        let b = episode_inputs(&ep, &Rotation::ALL, &mut bank, &bb).unwrap();
        assert_eq!(bank.stats(), (8, 8));
        let direct = bb
            .extract_features(&rotate(ep.query.image.view(), Rotation::R90))
            .unwrap();
        assert_eq!(a.queries.at_90().unwrap(), &direct);
        assert_eq!(b.queries.at_90().unwrap(), &direct);
        let (_, mask) = a.supports[0].at_270().unwrap();
        assert_eq!(mask, &rotate(ep.supports[0].mask.view(), Rotation::R270));

        let other = ToyBackbone::random(ToyBackboneConfig::default(), 3);
        episode_inputs(&ep, &[Rotation::R0], &mut bank, &other).unwrap();
        assert_eq!(bank.len(), 2);
    }
}
