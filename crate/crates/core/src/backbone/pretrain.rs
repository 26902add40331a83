//! Base-class pretraining with a pyramid-pooling segmentation head.

use log::info;
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ToyBackbone;
use crate::data::{augment_flip, Dataset, SplitConfig, IGNORE};
use crate::error::{FrinetError, Result};
use crate::nn::{
    adaptive_avg_pool, adaptive_avg_pool_backward, concat_channels, prefixed, prefixed_mut, relu, relu_backward,
    softmax_cross_entropy, split_channels, Bilinear, Conv2d, ConvCache, ConvGeometry, Param, Parameterized, Real, Sgd,
};

pub const PYRAMID_BINS: [usize; 4] = [1, 2, 3, 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 6,
            batch_size: 8,
            learning_rate: 0.02,
            momentum: 0.9,
            hidden: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub fold: usize,
    pub epoch_losses: Vec<f64>,
    /// Training pixel accuracy over the final epoch, non-ignore pixels only.
    pub pixel_accuracy: f64,
    pub images_used: usize,
}

/// Dense `(|base| + 1)`-way targets: 0 background, base classes 1.., everything else ignored.
pub fn pretrain_targets(mask: &Array2<u8>, split: &SplitConfig) -> Array2<u8> {
    mask.mapv(|m| {
        if m == 0 {
            0
        } else if let Some(i) = split.base_classes.iter().position(|&b| b == m) {
            i as u8 + 1
        } else {
            IGNORE
        }
    })
}

/// Fails if any novel-class pixel of `mask` carries a trainable label in `target`.
pub fn audit_pretrain_targets(mask: &Array2<u8>, target: &Array2<u8>, split: &SplitConfig) -> Result<()> {
    for (&m, &t) in mask.iter().zip(target.iter()) {
        if split.is_novel(m) && t != IGNORE {
            return Err(FrinetError::FoldLeakage { class_id: m });
        }
    }
    Ok(())
}

/// Pyramid pooling over bins {1,2,3,6}, a 3×3 fusion conv and a 1×1 classifier.
#[derive(Debug, Clone)]
pub struct PyramidPoolingHead<T> {
    reduce: Vec<Conv2d<T>>,
    fuse: Conv2d<T>,
    classify: Conv2d<T>,
}

struct HeadCache<T> {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    pooled: Vec<ConvCache<T>>,
    reduced: Vec<Array4<T>>,
    fuse: ConvCache<T>,
    hidden: Array4<T>,
    classify: ConvCache<T>,
}

impl<T: Real> PyramidPoolingHead<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        let branch = (channels / 4).max(1);
        let reduce = PYRAMID_BINS
            .iter()
            .map(|_| Conv2d::new(ConvGeometry::new(channels, branch, 1), rng))
            .collect();
        PyramidPoolingHead {
            reduce,
            fuse: Conv2d::new(
                ConvGeometry::new(channels + branch * PYRAMID_BINS.len(), hidden, 3).same(),
                rng,
            ),
            classify: Conv2d::new(ConvGeometry::new(hidden, classes, 1), rng),
        }
    }

    fn forward(&self, x: &Array4<T>, out_hw: (usize, usize)) -> (Array4<T>, HeadCache<T>) {
        let (_, _, h, w) = x.dim();
        let mut parts = vec![x.clone()];
        let mut pooled = Vec::new();
        let mut reduced = Vec::new();
        for (conv, &bins) in self.reduce.iter().zip(&PYRAMID_BINS) {
            let (y, c) = conv.forward(&adaptive_avg_pool(x, bins));
            let y = relu(&y);
            parts.push(Bilinear::new((bins, bins), (h, w)).forward(&y));
            pooled.push(c);
            reduced.push(y);
        }
        let refs: Vec<&Array4<T>> = parts.iter().collect();
        let (z, fuse) = self.fuse.forward(&concat_channels(&refs));
        let hidden = relu(&z);
        let (logits, classify) = self.classify.forward(&hidden);
        let up = Bilinear::new((h, w), out_hw).forward(&logits);
        (
            up,
            HeadCache {
                in_hw: (h, w),
                out_hw,
                pooled,
                reduced,
                fuse,
                hidden,
                classify,
            },
        )
    }

    fn backward(&mut self, cache: &HeadCache<T>, dy: &Array4<T>) -> Array4<T> {
        let (h, w) = cache.in_hw;
        let d = Bilinear::new(cache.in_hw, cache.out_hw).backward(dy);
        let d = self.classify.backward(&cache.classify, &d, true).expect("input grad");
        let d = relu_backward(&cache.hidden, &d);
        let d = self.fuse.backward(&cache.fuse, &d, true).expect("input grad");
        let channels = d.dim().1 - self.reduce[0].geometry.out_channels * PYRAMID_BINS.len();
        let mut widths = vec![channels];
        widths.extend(self.reduce.iter().map(|c| c.geometry.out_channels));
        let mut pieces = split_channels(&d, &widths).into_iter();
        let mut dx = pieces.next().expect("feature slice");
        for (i, piece) in pieces.enumerate() {
            let bins = PYRAMID_BINS[i];
            let g = Bilinear::new((bins, bins), (h, w)).backward(&piece);
            let g = relu_backward(&cache.reduced[i], &g);
            let g = self.reduce[i].backward(&cache.pooled[i], &g, true).expect("input grad");
            dx += &adaptive_avg_pool_backward(&g, h, w);
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for PyramidPoolingHead<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut v: Vec<_> = self
            .reduce
            .iter()
            .enumerate()
            .flat_map(|(i, c)| prefixed(&format!("pool{i}"), c.params()))
            .collect();
        v.extend(prefixed("fuse", self.fuse.params()));
        v.extend(prefixed("classify", self.classify.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v: Vec<_> = self
            .reduce
            .iter_mut()
            .enumerate()
            .flat_map(|(i, c)| prefixed_mut(&format!("pool{i}"), c.params_mut()))
            .collect();
        v.extend(prefixed_mut("fuse", self.fuse.params_mut()));
        v.extend(prefixed_mut("classify", self.classify.params_mut()));
        v
    }
}

struct Joint<'a> {
    backbone: &'a mut ToyBackbone<f32>,
    head: &'a mut PyramidPoolingHead<f32>,
}

impl Parameterized<f32> for Joint<'_> {
    fn params(&self) -> Vec<(String, &Param<f32>)> {
        let mut v = prefixed("backbone", self.backbone.params());
        v.extend(prefixed("head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<f32>)> {
        let mut v = prefixed_mut("backbone", self.backbone.params_mut());
        v.extend(prefixed_mut("head", self.head.params_mut()));
        v
    }
}

/// Trains `backbone` jointly with a throwaway pyramid-pooling head on the base classes of `split`.
///
/// Images are drawn from items containing at least one base class; novel
/// pixels become [`IGNORE`] and every batch passes the leakage audit before
/// it reaches the loss.
pub fn pretrain_on_base(
    backbone: &mut ToyBackbone<f32>,
    dataset: &Dataset,
    split: &SplitConfig,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if !backbone.is_loaded() {
        return Err(FrinetError::WeightsNotLoaded);
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(FrinetError::Config(
            "pretraining needs epochs ≥ 1 and batch_size ≥ 1".into(),
        ));
    }
    let items: Vec<usize> = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| split.base_classes.iter().any(|c| s.class_ids_present.contains(c)))
        .map(|(i, _)| i)
        .collect();
    if items.is_empty() {
        return Err(FrinetError::NoUsableClass {
            phase: "pretrain",
            needed: 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = PyramidPoolingHead::new(
        backbone.channels(),
        config.hidden,
        split.base_classes.len() + 1,
        &mut rng,
    );
    let sgd = Sgd::new(config.momentum);
    let steps_per_epoch = items.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs) as f64;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut pixel_accuracy = 0.0;

    for epoch in 0..config.epochs {
        let mut order = items.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut counted) = (0.0f64, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample = augment_flip(&dataset.samples[i], &mut rng);
                let target = pretrain_targets(&sample.mask, split);
                audit_pretrain_targets(&sample.mask, &target, split)?;
                images.push(sample.image);
                targets.push(target);
            }
            let views: Vec<_> = images.iter().map(|im| im.view()).collect();
            let batch = ndarray::stack(Axis(0), &views).expect("uniform image size");
            let (_, _, ih, iw) = batch.dim();

            let (features, bb_cache) = backbone.forward_train(&batch);
            let (logits, head_cache) = head.forward(&features, (ih, iw));
            let mut dlogits = Array4::zeros(logits.dim());
            let scale = 1.0 / chunk.len() as f32;
            let mut batch_loss = 0.0f64;
            for (b, target) in targets.iter().enumerate() {
                let l: Array3<f32> = logits.slice(s![b, .., .., ..]).to_owned();
                let (loss, grad) = softmax_cross_entropy(l.view(), target.view())?;
                batch_loss += loss as f64;
                dlogits.slice_mut(s![b, .., .., ..]).assign(&(grad * scale));
                for ((y, x), &t) in target.indexed_iter() {
                    if t == IGNORE {
                        continue;
                    }
                    let pred = (0..l.dim().0)
                        .max_by(|&a, &c| l[[a, y, x]].total_cmp(&l[[c, y, x]]))
                        .unwrap_or(0);
                    counted += 1;
                    correct += usize::from(pred == t as usize);
                }
            }
            if !batch_loss.is_finite() {
                return Err(FrinetError::NonFinite("pretraining loss"));
            }
            loss_sum += batch_loss;
            let dfeat = head.backward(&head_cache, &dlogits);
            backbone.backward(&bb_cache, &dfeat);
            let lr = config.learning_rate * (1.0 - step as f64 / total_steps).powf(0.9);
            sgd.step(
                &mut Joint {
                    backbone: &mut *backbone,
                    head: &mut head,
                },
                lr,
                1.0,
            );
            step += 1;
        }
        let mean = loss_sum / items.len() as f64;
        pixel_accuracy = correct as f64 / counted.max(1) as f64;
        info!(
            "pretrain fold {} epoch {}: loss {mean:.4}, pixel accuracy {pixel_accuracy:.4}",
            split.fold,
            epoch + 1
        );
        epoch_losses.push(mean);
    }
    Ok(PretrainOutcome {
        fold: split.fold,
        epoch_losses,
        pixel_accuracy,
        images_used: items.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_splits, SyntheticConfig};
    use std::collections::BTreeMap;

    fn split() -> SplitConfig {
        let names: BTreeMap<u8, String> = (1..=6).map(|c| (c, format!("c{c}"))).collect();
        synthetic_splits(&names).unwrap().remove(0)
    }

    #[test]
    fn novel_pixels_become_ignore() {
        let sp = split();
        let mask = Array2::from_shape_vec(
            (1, 5),
            vec![0, sp.novel_classes[0], sp.base_classes[0], IGNORE, sp.base_classes[1]],
        )
        .unwrap();
        let t = pretrain_targets(&mask, &sp);
        assert_eq!(t.as_slice().unwrap(), &[0, IGNORE, 1, IGNORE, 2]);
        audit_pretrain_targets(&mask, &t, &sp).unwrap();
    }

    #[test]
    fn audit_rejects_leaked_novel_label() {
        let sp = split();
        let novel = sp.novel_classes[0];
        let mask = Array2::from_elem((2, 2), novel);
        let leaked = Array2::from_elem((2, 2), 1u8);
        assert!(matches!(
            audit_pretrain_targets(&mask, &leaked, &sp),
            Err(FrinetError::FoldLeakage { class_id }) if class_id == novel
        ));
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = PyramidPoolingHead::<f64>::new(4, 3, 3, &mut rng);
        let x = Array4::from_shape_fn((1, 4, 6, 6), |(_, c, y, xx)| {
            ((c * 7 + y * 3 + xx * 5) % 9) as f64 / 9.0 - 0.4
        });
        let target = Array2::from_shape_fn((8, 8), |(y, xx)| ((y + 2 * xx) % 3) as u8);
        let loss = |head: &PyramidPoolingHead<f64>, x: &Array4<f64>| {
            let (l, _) = head.forward(x, (8, 8));
            softmax_cross_entropy(l.slice(s![0, .., .., ..]), target.view())
                .unwrap()
                .0
        };
        let (l, cache) = head.forward(&x, (8, 8));
        let (_, g) = softmax_cross_entropy(l.slice(s![0, .., .., ..]), target.view()).unwrap();
        let dx = head.backward(&cache, &g.insert_axis(Axis(0)));
        let eps = 1e-5;
        for idx in [(0, 0, 0, 0), (0, 2, 3, 4), (0, 3, 5, 1)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&head, &xp) - loss(&head, &xm)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-7 + 1e-5 * fd.abs(), "{fd} vs {}", dx[idx]);
        }
        let analytic = head.fuse.weight.grad[[1, 5, 1, 2]];
        let mut hp = head.clone();
        hp.fuse.weight.value[[1, 5, 1, 2]] += eps;
        let mut hm = head.clone();
        hm.fuse.weight.value[[1, 5, 1, 2]] -= eps;
        let fd = (loss(&hp, &x) - loss(&hm, &x)) / (2.0 * eps);
        assert!((fd - analytic).abs() < 1e-7 + 1e-5 * fd.abs());
    }

    #[test]
    fn short_pretraining_lowers_loss() {
        let ds = crate::data::generate_synthetic_dataset(&SyntheticConfig {
            num_images: 24,
            rng_seed: 5,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let sp = ds.split(0).unwrap().clone();
        let mut bb = ToyBackbone::random(super::super::ToyBackboneConfig::default(), 1);
        let out = pretrain_on_base(
            &mut bb,
            &ds,
            &sp,
            &PretrainConfig {
                epochs: 3,
                ..PretrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.epoch_losses.len(), 3);
        assert!(out.epoch_losses[2] < out.epoch_losses[0], "{:?}", out.epoch_losses);
        assert!((0.0..=1.0).contains(&out.pixel_accuracy));
    }
}
