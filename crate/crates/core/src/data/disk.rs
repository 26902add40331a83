//! Dataset directory layout:
//!
//! ```text
//! root/images/<stem>.png   8-bit RGB
//! root/masks/<stem>.png    8-bit gray, class ids (0 background, 255 ignore)
//! root/splits.json         {"<fold>": {"base": [ids], "novel": [ids]}}
//! root/classes.json        {"<id>": "<name>"}
//! ```

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Array4};

use super::splits::{parse_class_names, parse_splits, splits_to_json};
use super::{Dataset, ImageSample};
use crate::error::{FrinetError, Result};
use crate::nn::Bilinear;

pub fn resize_image(image: &Array3<f32>, size: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    if (h, w) == (size, size) {
        return image.clone();
    }
    let x = image.clone().into_shape_with_order((1, c, h, w)).expect("contiguous");
    let y: Array4<f32> = Bilinear::new((h, w), (size, size)).forward(&x);
    y.into_shape_with_order((c, size, size)).expect("contiguous")
}

/// Nearest-neighbour resize (`src = floor(dst * in / out)`), so labels never blend.
pub fn resize_mask(mask: &Array2<u8>, size: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((size, size), |(y, x)| mask[[y * h / size, x * w / size]])
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| FrinetError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    entries.sort();
    Ok(entries)
}

pub(crate) fn image_to_rgb(image: &Array3<f32>) -> RgbImage {
    let (_, h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub(crate) fn rgb_to_image(rgb: &RgbImage) -> Array3<f32> {
    let (w, h) = rgb.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

/// Loads a dataset directory, resizing every pair to `input_size`.
pub fn load_dataset(root: &Path, input_size: usize) -> Result<Dataset> {
    let classes_path = root.join("classes.json");
    let text = fs::read_to_string(&classes_path).map_err(|e| FrinetError::io(&classes_path, e))?;
    let class_names = parse_class_names(&text).map_err(|e| FrinetError::format(&classes_path, e.to_string()))?;
    let splits_path = root.join("splits.json");
    let text = fs::read_to_string(&splits_path).map_err(|e| FrinetError::io(&splits_path, e))?;
    let splits = parse_splits(&text, &class_names)?;

    let mut samples = Vec::new();
    for image_path in read_dir_sorted(&root.join("images"))? {
        let stem = image_path.file_name().expect("file entry");
        let mask_path = root.join("masks").join(stem);
        let rgb = image::open(&image_path)?.to_rgb8();
        let gray = image::open(&mask_path)
            .map_err(|e| FrinetError::format(&mask_path, e.to_string()))?
            .to_luma8();
        if rgb.dimensions() != gray.dimensions() {
            return Err(FrinetError::format(&mask_path, "mask size differs from its image"));
        }
        let (w, h) = gray.dimensions();
        let mask = Array2::from_shape_vec((h as usize, w as usize), gray.into_raw()).expect("luma buffer");
        let image = rgb_to_image(&rgb);
        samples.push(ImageSample::new(
            resize_image(&image, input_size),
            resize_mask(&mask, input_size),
        )?);
    }
    Dataset::new(samples, class_names, splits)
}

/// Writes a dataset in the directory layout read by [`load_dataset`].
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| FrinetError::io(&dir, e))?;
    }
    for (i, s) in dataset.samples.iter().enumerate() {
        let name = format!("{i:05}.png");
        image_to_rgb(&s.image).save(root.join("images").join(&name))?;
        let (h, w) = s.mask.dim();
        let gray = GrayImage::from_raw(w as u32, h as u32, s.mask.iter().copied().collect())
            .expect("mask buffer matches dimensions");
        gray.save(root.join("masks").join(&name))?;
    }
    let classes: std::collections::BTreeMap<String, &String> =
        dataset.class_names.iter().map(|(k, v)| (k.to_string(), v)).collect();
    let p = root.join("classes.json");
    fs::write(&p, serde_json::to_string_pretty(&classes)?).map_err(|e| FrinetError::io(&p, e))?;
    let p = root.join("splits.json");
    fs::write(&p, splits_to_json(&dataset.splits)?).map_err(|e| FrinetError::io(&p, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticConfig};

    #[test]
    fn directory_round_trip_is_lossless() {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            num_images: 6,
            rng_seed: 9,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path(), 64).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.image, b.image);
        }
        assert_eq!(back.splits, ds.splits);
        assert_eq!(back.class_names, ds.class_names);
    }

    #[test]
    fn nearest_mask_resize_keeps_label_set() {
        let mask = Array2::from_shape_fn((8, 8), |(y, x)| {
            if x < 4 {
                3
            } else if y < 2 {
                255
            } else {
                0
            }
        });
        let small = resize_mask(&mask, 4);
        assert!(small.iter().all(|v| [0, 3, 255].contains(v)));
        assert_eq!(small[[3, 0]], 3);
        let big = resize_mask(&mask, 16);
        assert_eq!(big[[0, 15]], 255);
    }
}
