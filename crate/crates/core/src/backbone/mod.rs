//! Frozen convolutional feature extractor.
//!
//! The reference extractor is a four-block conv stack (3×3 conv, batch norm,
//! ReLU) with two stride-2 blocks, giving stride 4. Batch norm always runs on
//! its running statistics during extraction, so features are a pure function of
//! the weights and the image.

mod persist;
mod pretrain;

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

pub use persist::{
    load_backbone, probe_feature_hash, probe_image, read_metadata, save_backbone, BackboneMetadata, PROBE_SIZE,
};
pub use pretrain::{
    audit_pretrain_targets, pretrain_on_base, pretrain_targets, PretrainConfig, PretrainOutcome, PyramidPoolingHead,
};

use crate::error::{FrinetError, Result};
use crate::nn::{
    prefixed, prefixed_mut, relu, relu_backward, BatchNorm2d, BatchNormCache, Conv2d, ConvCache, ConvGeometry, Param,
    Parameterized, Real,
};

/// Dense `C × H' × W'` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub data: Array3<T>,
    pub stride: usize,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(data: Array3<T>, stride: usize) -> Self {
        FeatureMap { data, stride }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            data: self.data.mapv(|v| U::of(v.to_f64_lossy())),
            stride: self.stride,
        }
    }
}

/// Declared identity of a stored extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub channels: usize,
    pub stride: usize,
    pub frozen: bool,
    pub weights_uri: PathBuf,
}

/// Architecture of the reference extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyBackboneConfig {
    /// Output channels of the four blocks; the last one is the feature width.
    pub widths: [usize; 4],
    /// Zero padding of 1 on every conv. Padding-free stacks shrink the map.
    pub padded: bool,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        ToyBackboneConfig {
            widths: [16, 32, 64, 64],
            padded: true,
        }
    }
}

pub const TOY_BACKBONE_NAME: &str = "toy-conv4";

impl ToyBackboneConfig {
    pub fn channels(&self) -> usize {
        self.widths[3]
    }

    pub fn stride(&self) -> usize {
        4
    }

    fn geometries(&self) -> [ConvGeometry; 4] {
        let pad = usize::from(self.padded);
        let w = self.widths;
        [
            ConvGeometry::new(3, w[0], 3).padding(pad),
            ConvGeometry::new(w[0], w[1], 3).stride(2).padding(pad),
            ConvGeometry::new(w[1], w[2], 3).padding(pad),
            ConvGeometry::new(w[2], w[3], 3).stride(2).padding(pad),
        ]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

pub(crate) struct BlockCache<T> {
    conv: ConvCache<T>,
    bn: BatchNormCache<T>,
    out: Array4<T>,
}

impl<T: Real> ConvBnRelu<T> {
    fn infer(&self, x: &Array4<T>) -> Array4<T> {
        relu(&self.bn.infer(&self.conv.infer(x)))
    }

    fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, BlockCache<T>) {
        let (y, conv) = self.conv.forward(x);
        let (y, bn) = self.bn.forward_train(&y);
        let out = relu(&y);
        (out.clone(), BlockCache { conv, bn, out })
    }

    fn backward(&mut self, cache: &BlockCache<T>, dy: &Array4<T>, need_input_grad: bool) -> Option<Array4<T>> {
        let d = relu_backward(&cache.out, dy);
        let d = self.bn.backward(&cache.bn, &d);
        self.conv.backward(&cache.conv, &d, need_input_grad)
    }
}

impl<T: Real> Parameterized<T> for ConvBnRelu<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = prefixed("conv", self.conv.params());
        v.extend(prefixed("bn", self.bn.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = prefixed_mut("conv", self.conv.params_mut());
        v.extend(prefixed_mut("bn", self.bn.params_mut()));
        v
    }
}

/// The reference four-block extractor.
#[derive(Debug, Clone)]
pub struct ToyBackbone<T = f32> {
    pub config: ToyBackboneConfig,
    pub(crate) blocks: Vec<ConvBnRelu<T>>,
    loaded: bool,
}

impl<T: Real> ToyBackbone<T> {
    /// Architecture only; extraction fails until weights are loaded or initialized.
    pub fn uninitialized(config: ToyBackboneConfig) -> Self {
        let blocks = config
            .geometries()
            .into_iter()
            .map(|g| ConvBnRelu {
                conv: Conv2d::zeroed(g),
                bn: BatchNorm2d::new(g.out_channels),
            })
            .collect();
        ToyBackbone {
            config,
            blocks,
            loaded: false,
        }
    }

    /// He-initialized weights drawn from `seed`.
    pub fn random(config: ToyBackboneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = config
            .geometries()
            .into_iter()
            .map(|g| ConvBnRelu {
                conv: Conv2d::new(g, &mut rng),
                bn: BatchNorm2d::new(g.out_channels),
            })
            .collect();
        ToyBackbone {
            config,
            blocks,
            loaded: true,
        }
    }

    pub(crate) fn mark_loaded(&mut self) {
        self.loaded = true;
    }

    pub fn is_loaded(&self) -> bool {
        self.loaded
    }

    pub fn channels(&self) -> usize {
        self.config.channels()
    }

    pub fn stride(&self) -> usize {
        self.config.stride()
    }

    /// Inference-mode features for a `[3, H, W]` image.
    pub fn extract_features(&self, image: &Array3<T>) -> Result<FeatureMap<T>> {
        let batch = self.extract_batch(&image.view().insert_axis(ndarray::Axis(0)).to_owned())?;
        let data = batch.index_axis_move(ndarray::Axis(0), 0);
        Ok(FeatureMap::new(data, self.stride()))
    }

    /// Inference-mode features for a `[N, 3, H, W]` batch.
    pub fn extract_batch(&self, images: &Array4<T>) -> Result<Array4<T>> {
        if !self.loaded {
            return Err(FrinetError::WeightsNotLoaded);
        }
        if images.dim().1 != 3 {
            return Err(FrinetError::ShapeMismatch {
                context: "backbone input",
                expected: vec![3],
                found: vec![images.dim().1],
            });
        }
        let mut x = images.to_owned();
        for block in &self.blocks {
            x = block.infer(&x);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FrinetError::NonFinite("backbone"));
        }
        Ok(x)
    }

    pub(crate) fn forward_train(&mut self, images: &Array4<T>) -> (Array4<T>, Vec<BlockCache<T>>) {
        let mut x = images.to_owned();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (y, c) = block.forward_train(&x);
            caches.push(c);
            x = y;
        }
        (x, caches)
    }

    pub(crate) fn backward(&mut self, caches: &[BlockCache<T>], dy: &Array4<T>) {
        let mut d = dy.clone();
        let last = self.blocks.len() - 1;
        for (i, (block, cache)) in self.blocks.iter_mut().zip(caches).enumerate().rev() {
            match block.backward(cache, &d, i > 0) {
                Some(next) => d = next,
                None => debug_assert_eq!(i, 0, "only the first block skips its input gradient ({last})"),
            }
        }
    }

    pub fn weight_checksum(&self) -> String {
        crate::store::params_checksum(self)
    }
}

impl<T: Real> Parameterized<T> for ToyBackbone<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| prefixed(&format!("block{i}"), b.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| prefixed_mut(&format!("block{i}"), b.params_mut()))
            .collect()
    }
}
