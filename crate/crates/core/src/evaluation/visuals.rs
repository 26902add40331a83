//! PNG renderings of one episode.
//!
//! Overlays encode the mask in the red channel: foreground pixels get
//! `R = 128 + floor(r · 127)`, every other channel and every background pixel
//! gets `floor(c · 127)`, so `R ≥ 128` exactly where the mask is foreground.
//!
//! Relation heatmaps map a weight `w ∈ [0, 1]` linearly to
//! `(round(255·w), 0, round(255·(1 − w)))`: blue for 0, red for 1.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::data::Episode;
use crate::engine::ForwardOutput;
use crate::error::{FrinetError, Result};

/// Support with contour, query, ground truth overlay, prediction overlay, relation panels.
pub const VISUAL_FILES: [&str; 5] = [
    "support_contour.png",
    "query.png",
    "ground_truth_overlay.png",
    "prediction_overlay.png",
    "relation_heatmaps.png",
];

const PANEL_GAP: u32 = 2;

fn half(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 127.0).floor() as u8
}

fn plain(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_png(image: &Array3<f32>) -> RgbImage {
    let (_, h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            plain(image[[0, y, x]]),
            plain(image[[1, y, x]]),
            plain(image[[2, y, x]]),
        ])
    })
}

/// Darkened image with the foreground (`mask == 1`) lifted into the upper half of the red range.
pub fn overlay_mask(image: &Array3<f32>, mask: &Array2<u8>) -> RgbImage {
    let (_, h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let fg = mask[[y, x]] == 1;
        let r = half(image[[0, y, x]]) + if fg { 128 } else { 0 };
        Rgb([r, half(image[[1, y, x]]), half(image[[2, y, x]])])
    })
}

/// Foreground pixels of `overlay` (red channel ≥ 128).
pub fn decode_overlay(overlay: &RgbImage) -> Array2<u8> {
    Array2::from_shape_fn((overlay.height() as usize, overlay.width() as usize), |(y, x)| {
        (overlay.get_pixel(x as u32, y as u32)[0] >= 128) as u8
    })
}

fn contour(image: &Array3<f32>, mask: &Array2<u8>) -> RgbImage {
    let mut out = image_png(image);
    let (h, w) = mask.dim();
    for ((y, x), &m) in mask.indexed_iter() {
        if m != 1 {
            continue;
        }
        let edge = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|(dy, dx)| {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 || mask[[ny as usize, nx as usize]] != 1
        });
        if edge {
            out.put_pixel(x as u32, y as u32, Rgb([255, 255, 0]));
        }
    }
    out
}

pub fn heatmap_color(w: f64) -> [u8; 3] {
    let w = w.clamp(0.0, 1.0);
    [(255.0 * w).round() as u8, 0, (255.0 * (1.0 - w)).round() as u8]
}

/// One panel per orientation plane, each upscaled by `scale`, separated by white gaps.
pub fn heatmap_panels(weights: &Array3<f32>, scale: u32) -> RgbImage {
    let (n, h, w) = weights.dim();
    let (pw, ph) = (w as u32 * scale, h as u32 * scale);
    let width = n as u32 * pw + (n as u32).saturating_sub(1) * PANEL_GAP;
    let mut img = RgbImage::from_pixel(width, ph, Rgb([255, 255, 255]));
    for k in 0..n {
        let x0 = k as u32 * (pw + PANEL_GAP);
        for y in 0..ph {
            for x in 0..pw {
                let v = weights[[k, (y / scale) as usize, (x / scale) as usize]];
                img.put_pixel(x0 + x, y, Rgb(heatmap_color(v as f64)));
            }
        }
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => FrinetError::io(path, io),
        other => FrinetError::Image(other),
    })
}

/// Writes [`VISUAL_FILES`] for one episode into `out_dir` and returns their paths.
///
/// Heatmaps show the relation weights of the unrotated query branch.
pub fn render_visuals(
    episode: &Episode,
    output: &ForwardOutput<f32>,
    prediction: &Array2<u8>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| FrinetError::io(out_dir, e))?;
    let support = &episode.supports[0];
    let query = &episode.query;
    let relations = output
        .relations
        .at_0()
        .ok_or_else(|| FrinetError::Config("output has no 0° branch".into()))?;
    let scale = (query.height() / relations.weights.dim().1.max(1)).max(1) as u32;
    let images = [
        contour(&support.image, &support.mask),
        image_png(&query.image),
        overlay_mask(&query.image, &query.mask),
        overlay_mask(&query.image, prediction),
        heatmap_panels(&relations.weights, scale),
    ];
    let mut paths = Vec::with_capacity(VISUAL_FILES.len());
    for (name, img) in VISUAL_FILES.iter().zip(&images) {
        let p = out_dir.join(name);
        save_png(img, &p)?;
        paths.push(p);
    }
    Ok(paths)
}
