use rand::Rng;

use super::rotation::{flip_horizontal, rotate, Rotation};
use super::ImageSample;

/// Mirrors image and mask jointly about the vertical axis.
pub fn flip_sample(sample: &ImageSample) -> ImageSample {
    ImageSample {
        image: flip_horizontal(sample.image.view()),
        mask: flip_horizontal(sample.mask.view()),
        class_ids_present: sample.class_ids_present.clone(),
        origin: sample.origin.map(|o| o.flipped()),
    }
}

/// Rotates image and mask jointly.
pub fn rotate_sample(sample: &ImageSample, rotation: Rotation) -> ImageSample {
    ImageSample {
        image: rotate(sample.image.view(), rotation),
        mask: rotate(sample.mask.view(), rotation),
        class_ids_present: sample.class_ids_present.clone(),
        origin: sample.origin.map(|o| o.rotated(rotation)),
    }
}

/// Training-time horizontal flip with probability 0.5.
pub fn augment_flip<R: Rng + ?Sized>(sample: &ImageSample, rng: &mut R) -> ImageSample {
    augment_flip_forced(sample, rng.random_bool(0.5))
}

pub fn augment_flip_forced(sample: &ImageSample, flip: bool) -> ImageSample {
    if flip {
        flip_sample(sample)
    } else {
        sample.clone()
    }
}
