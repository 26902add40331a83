use log::warn;
use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Episode, ImageSample, Phase, SplitConfig, IGNORE};
use crate::error::{FrinetError, Result};

/// Foreground = `target_class`, ignore stays ignore, everything else background.
pub fn binarize_mask(mask: &Array2<u8>, target_class: u8) -> Array2<u8> {
    mask.mapv(|m| match m {
        IGNORE => IGNORE,
        m if m == target_class => 1,
        _ => 0,
    })
}

fn binarized(sample: &ImageSample, target_class: u8) -> ImageSample {
    ImageSample {
        image: sample.image.clone(),
        mask: binarize_mask(&sample.mask, target_class),
        class_ids_present: [1].into_iter().collect(),
        origin: sample.origin,
    }
}

/// Draws K-shot episodes for one phase of one fold.
#[derive(Debug, Clone)]
pub struct EpisodeSampler<'a> {
    dataset: &'a Dataset,
    split: &'a SplitConfig,
    phase: Phase,
    shots: usize,
    usable: Vec<(u8, Vec<usize>)>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(dataset: &'a Dataset, split: &'a SplitConfig, phase: Phase, shots: usize) -> Result<Self> {
        if shots == 0 {
            return Err(FrinetError::Config("shot count must be at least 1".into()));
        }
        let mut usable = Vec::new();
        for &class in split.classes_for(phase) {
            let images = dataset.images_with_class(class).to_vec();
            if images.len() < shots + 1 {
                warn!(
                    "class {class} ({}) has {} images, fewer than {} needed; skipped",
                    split.name_of(class),
                    images.len(),
                    shots + 1
                );
                continue;
            }
            usable.push((class, images));
        }
        if usable.is_empty() {
            return Err(FrinetError::NoUsableClass {
                phase: phase.name(),
                needed: shots + 1,
            });
        }
        Ok(EpisodeSampler {
            dataset,
            split,
            phase,
            shots,
            usable,
        })
    }

    /// Classes that can actually be sampled.
    pub fn classes(&self) -> Vec<u8> {
        self.usable.iter().map(|(c, _)| *c).collect()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Episode {
        let (class, images) = &self.usable[rng.random_range(0..self.usable.len())];
        let picks = index::sample(rng, images.len(), self.shots + 1);
        let mut chosen = picks.iter().map(|i| &self.dataset.samples[images[i]]);
        let query = binarized(chosen.next().expect("k+1 picks"), *class);
        let supports = chosen.map(|s| binarized(s, *class)).collect();
        Episode {
            supports,
            query,
            target_class: *class,
            shots: self.shots,
            fold: self.split.fold,
        }
    }
}

/// One episode, deterministic in `seed`.
pub fn sample_episode(
    dataset: &Dataset,
    split: &SplitConfig,
    phase: Phase,
    shots: usize,
    seed: u64,
) -> Result<Episode> {
    let sampler = EpisodeSampler::new(dataset, split, phase, shots)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample(&mut rng))
}
