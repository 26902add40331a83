//! Datasets, class splits, episodic sampling and exact rotation transforms.

mod augment;
mod disk;
mod rotation;
mod sampler;
mod splits;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};

pub use augment::{augment_flip, augment_flip_forced, flip_sample, rotate_sample};
pub use disk::{load_dataset, resize_image, resize_mask, save_dataset};
pub use rotation::{flip_horizontal, make_orientation_set, rotate, rotate_exact, OrientationSet, Rotation};
pub use sampler::{binarize_mask, sample_episode, EpisodeSampler};
pub use splits::{isaid_class_names, isaid_split, synthetic_splits, SplitConfig};
pub use synthetic::{generate_synthetic_dataset, render_shape, ShapeKind, SyntheticConfig};

use crate::error::{FrinetError, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// How a sample was derived from a dataset item: `rotate(flip^flipped(item))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleOrigin {
    pub index: usize,
    pub flipped: bool,
    pub rotation: Rotation,
}

impl SampleOrigin {
    pub fn identity(index: usize) -> Self {
        SampleOrigin {
            index,
            flipped: false,
            rotation: Rotation::R0,
        }
    }

    pub fn rotated(self, r: Rotation) -> Self {
        SampleOrigin {
            rotation: self.rotation.then(r),
            ..self
        }
    }

    /// Horizontal mirroring conjugates the rotation: `H·R^k = R^-k·H`.
    pub fn flipped(self) -> Self {
        SampleOrigin {
            index: self.index,
            flipped: !self.flipped,
            rotation: self.rotation.inverse(),
        }
    }
}

/// One image with its label grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Array3<f32>,
    /// `[H, W]`: 0 background, class id ≥ 1, or [`IGNORE`].
    pub mask: Array2<u8>,
    pub class_ids_present: BTreeSet<u8>,
    pub origin: Option<SampleOrigin>,
}

impl ImageSample {
    pub fn new(image: Array3<f32>, mask: Array2<u8>) -> Result<Self> {
        let (_, h, w) = image.dim();
        if mask.dim() != (h, w) {
            return Err(FrinetError::ShapeMismatch {
                context: "image/mask pair",
                expected: vec![h, w],
                found: mask.shape().to_vec(),
            });
        }
        let class_ids_present = present_classes(&mask);
        Ok(ImageSample {
            image,
            mask,
            class_ids_present,
            origin: None,
        })
    }

    pub fn with_origin(mut self, origin: SampleOrigin) -> Self {
        self.origin = Some(origin);
        self
    }

    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn pixel_count(&self, class_id: u8) -> usize {
        self.mask.iter().filter(|&&m| m == class_id).count()
    }
}

pub(crate) fn present_classes(mask: &Array2<u8>) -> BTreeSet<u8> {
    mask.iter().copied().filter(|&m| m != 0 && m != IGNORE).collect()
}

/// Which class split an episode draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Train,
    Test,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Test => "test",
        }
    }
}

/// K annotated supports plus one query, all binarized against `target_class`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub supports: Vec<ImageSample>,
    pub query: ImageSample,
    pub target_class: u8,
    pub shots: usize,
    pub fold: usize,
}

impl Episode {
    /// Stable identifier of the dataset items used (supports then query).
    pub fn item_ids(&self) -> Vec<Option<usize>> {
        self.supports
            .iter()
            .chain(std::iter::once(&self.query))
            .map(|s| s.origin.map(|o| o.index))
            .collect()
    }
}

/// An in-memory labelled image collection with its class table and folds.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub class_names: BTreeMap<u8, String>,
    pub splits: Vec<SplitConfig>,
    class_index: BTreeMap<u8, Vec<usize>>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>, class_names: BTreeMap<u8, String>, splits: Vec<SplitConfig>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if let Some(bad) = s.class_ids_present.iter().find(|c| !class_names.contains_key(c)) {
                return Err(FrinetError::Config(format!(
                    "sample {i} uses class id {bad} missing from the class table"
                )));
            }
        }
        for split in &splits {
            split.validate(&class_names)?;
        }
        let mut class_index: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            for &c in &s.class_ids_present {
                class_index.entry(c).or_default().push(i);
            }
        }
        let samples = samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.with_origin(SampleOrigin::identity(i)))
            .collect();
        Ok(Dataset {
            samples,
            class_names,
            splits,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images_with_class(&self, class_id: u8) -> &[usize] {
        self.class_index.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn split(&self, fold: usize) -> Result<&SplitConfig> {
        self.splits
            .iter()
            .find(|s| s.fold == fold)
            .ok_or_else(|| FrinetError::Config(format!("dataset has no fold {fold}")))
    }

    /// Number of images containing at least one class of `classes`.
    pub fn count_with_any(&self, classes: &[u8]) -> usize {
        self.samples
            .iter()
            .filter(|s| classes.iter().any(|c| s.class_ids_present.contains(c)))
            .count()
    }

    /// The sample for an origin, materializing flips and rotations.
    pub fn view(&self, origin: SampleOrigin) -> ImageSample {
        let base = &self.samples[origin.index];
        let flipped;
        let s = if origin.flipped {
            flipped = flip_sample(base);
            &flipped
        } else {
            base
        };
        rotate_sample(s, origin.rotation)
    }
}
