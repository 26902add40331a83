//! Rotation-invariant segmentation head.
//!
//! Each orientation branch is decoded by a shared ASPP head, rotated back into
//! the query frame, supervised against the same ground truth, and finally
//! fused by two small convolutions (one over the foreground maps, one over the
//! background maps).

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::Rng;

use crate::backbone::FeatureMap;
use crate::data::{rotate, OrientationSet, Rotation};
use crate::error::{FrinetError, Result};
use crate::nn::{
    binary_cross_entropy, concat_channels, global_avg_pool, global_avg_pool_backward, prefixed, prefixed_mut, relu,
    relu_backward, split_channels, Bilinear, Conv2d, ConvCache, ConvGeometry, GroupNorm, GroupNormCache, Param,
    Parameterized, Real, BG, FG,
};
use crate::rotmatch::group_count;

pub const ASPP_RATES: [usize; 4] = [1, 6, 12, 18];
pub const DEFAULT_MU: f64 = 0.25;

/// Two-channel logits (`FG`, `BG`) at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchLogits<T = f32> {
    pub data: Array3<T>,
    /// Frame the logits live in; `None` marks the fused result.
    pub orientation: Option<Rotation>,
}

impl<T: Real> BranchLogits<T> {
    pub fn new(data: Array3<T>, orientation: Option<Rotation>) -> Self {
        BranchLogits { data, orientation }
    }

    pub fn foreground(&self) -> ndarray::ArrayView2<'_, T> {
        self.data.index_axis(Axis(0), FG)
    }

    pub fn background(&self) -> ndarray::ArrayView2<'_, T> {
        self.data.index_axis(Axis(0), BG)
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// Atrous spatial pyramid pooling: 3×3 branches at rates {1, 6, 12, 18} plus image pooling, projected by 1×1.
#[derive(Debug, Clone)]
pub struct Aspp<T> {
    pub atrous: Vec<Conv2d<T>>,
    pub pool: Conv2d<T>,
    pub project: Conv2d<T>,
}

pub struct AsppCache<T> {
    hw: (usize, usize),
    atrous: Vec<(ConvCache<T>, Array4<T>)>,
    pool: (ConvCache<T>, Array4<T>),
    project: (ConvCache<T>, Array4<T>),
}

impl<T: Real> Aspp<T> {
    pub fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        Aspp {
            atrous: ASPP_RATES
                .iter()
                .map(|&r| Conv2d::new(ConvGeometry::new(width, width, 3).dilation(r).same(), rng))
                .collect(),
            pool: Conv2d::new(ConvGeometry::new(width, width, 1), rng),
            project: Conv2d::new(ConvGeometry::new(width * (ASPP_RATES.len() + 1), width, 1), rng),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, AsppCache<T>) {
        let (n, c, h, w) = x.dim();
        let mut outs = Vec::with_capacity(ASPP_RATES.len() + 1);
        let mut atrous = Vec::with_capacity(ASPP_RATES.len());
        for conv in &self.atrous {
            let (y, cache) = conv.forward(x);
            let y = relu(&y);
            outs.push(y.clone());
            atrous.push((cache, y));
        }
        let (p, pool_cache) = self.pool.forward(&global_avg_pool(x));
        let p = relu(&p);
        outs.push(p.broadcast((n, c, h, w)).expect("1x1 broadcast").to_owned());
        let refs: Vec<&Array4<T>> = outs.iter().collect();
        let (y, project_cache) = self.project.forward(&concat_channels(&refs));
        let y = relu(&y);
        (
            y.clone(),
            AsppCache {
                hw: (h, w),
                atrous,
                pool: (pool_cache, p),
                project: (project_cache, y),
            },
        )
    }

    pub fn backward(&mut self, cache: &AsppCache<T>, dy: &Array4<T>) -> Array4<T> {
        let (h, w) = cache.hw;
        let d = relu_backward(&cache.project.1, dy);
        let d = self.project.backward(&cache.project.0, &d, true).expect("input grad");
        let width = self.pool.geometry.out_channels;
        let pieces = split_channels(&d, &vec![width; ASPP_RATES.len() + 1]);
        let mut dx: Option<Array4<T>> = None;
        for ((conv, (c, y)), piece) in self.atrous.iter_mut().zip(&cache.atrous).zip(&pieces) {
            let g = relu_backward(y, piece);
            let g = conv.backward(c, &g, true).expect("input grad");
            match dx.as_mut() {
                Some(acc) => *acc += &g,
                None => dx = Some(g),
            }
        }
        let pooled = pieces[ASPP_RATES.len()]
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .insert_axis(Axis(2))
            .insert_axis(Axis(3));
        let g = relu_backward(&cache.pool.1, &pooled);
        let g = self.pool.backward(&cache.pool.0, &g, true).expect("input grad");
        let mut dx = dx.expect("at least one atrous branch");
        dx += &global_avg_pool_backward(&g, h, w);
        dx
    }
}

impl<T: Real> Parameterized<T> for Aspp<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut v: Vec<_> = self
            .atrous
            .iter()
            .enumerate()
            .flat_map(|(i, c)| prefixed(&format!("rate{}", ASPP_RATES[i]), c.params()))
            .collect();
        v.extend(prefixed("pool", self.pool.params()));
        v.extend(prefixed("project", self.project.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v: Vec<_> = self
            .atrous
            .iter_mut()
            .enumerate()
            .flat_map(|(i, c)| prefixed_mut(&format!("rate{}", ASPP_RATES[i]), c.params_mut()))
            .collect();
        v.extend(prefixed_mut("pool", self.pool.params_mut()));
        v.extend(prefixed_mut("project", self.project.params_mut()));
        v
    }
}

/// `conv3x3 → GroupNorm → ReLU → ASPP → conv1x1(→2) → bilinear upsample`.
#[derive(Debug, Clone)]
pub struct DecodeHead<T> {
    pub conv: Conv2d<T>,
    pub norm: GroupNorm<T>,
    pub aspp: Aspp<T>,
    pub classify: Conv2d<T>,
}

pub struct DecodeCache<T> {
    conv: ConvCache<T>,
    norm: GroupNormCache<T>,
    hidden: Array4<T>,
    aspp: AsppCache<T>,
    classify: ConvCache<T>,
    upsample: Bilinear,
}

impl<T: Real> DecodeHead<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, width: usize, rng: &mut R) -> Self {
        DecodeHead {
            conv: Conv2d::new(ConvGeometry::new(channels, width, 3).same(), rng),
            norm: GroupNorm::new(group_count(width), width),
            aspp: Aspp::new(width, rng),
            classify: Conv2d::new(ConvGeometry::new(width, 2, 1), rng),
        }
    }

    pub fn forward(&self, x: &Array4<T>, out_hw: (usize, usize)) -> Result<(Array4<T>, DecodeCache<T>)> {
        let (_, c, h, w) = x.dim();
        if c != self.conv.geometry.in_channels {
            return Err(FrinetError::ShapeMismatch {
                context: "decode head",
                expected: vec![self.conv.geometry.in_channels],
                found: vec![c],
            });
        }
        let (z, conv) = self.conv.forward(x);
        let (z, norm) = self.norm.forward(&z);
        let hidden = relu(&z);
        let (a, aspp) = self.aspp.forward(&hidden);
        let (logits, classify) = self.classify.forward(&a);
        let upsample = Bilinear::new((h, w), out_hw);
        Ok((
            upsample.forward(&logits),
            DecodeCache {
                conv,
                norm,
                hidden,
                aspp,
                classify,
                upsample,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient with respect to the activated features.
    pub fn backward(&mut self, cache: &DecodeCache<T>, dy: &Array4<T>) -> Array4<T> {
        let d = cache.upsample.backward(dy);
        let d = self.classify.backward(&cache.classify, &d, true).expect("input grad");
        let d = self.aspp.backward(&cache.aspp, &d);
        let d = relu_backward(&cache.hidden, &d);
        let d = self.norm.backward(&cache.norm, &d);
        self.conv.backward(&cache.conv, &d, true).expect("input grad")
    }
}

impl<T: Real> Parameterized<T> for DecodeHead<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = prefixed("conv", self.conv.params());
        v.extend(prefixed("norm", self.norm.params()));
        v.extend(prefixed("aspp", self.aspp.params()));
        v.extend(prefixed("classify", self.classify.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = prefixed_mut("conv", self.conv.params_mut());
        v.extend(prefixed_mut("norm", self.norm.params_mut()));
        v.extend(prefixed_mut("aspp", self.aspp.params_mut()));
        v.extend(prefixed_mut("classify", self.classify.params_mut()));
        v
    }
}

/// Decodes one activated feature map into logits at `out_hw`, tagged with its branch orientation.
pub fn decode_branch<T: Real>(
    head: &DecodeHead<T>,
    activated: &FeatureMap<T>,
    out_hw: (usize, usize),
    orientation: Rotation,
) -> Result<BranchLogits<T>> {
    let x = activated.data.view().insert_axis(Axis(0)).to_owned();
    let (y, _) = head.forward(&x, out_hw)?;
    Ok(BranchLogits::new(y.index_axis_move(Axis(0), 0), Some(orientation)))
}

/// Rotates a branch back into the query frame.
pub fn unrotate_logits<T: Real>(logits: &BranchLogits<T>) -> BranchLogits<T> {
    match logits.orientation {
        Some(r) => BranchLogits::new(rotate(logits.data.view(), r.inverse()), Some(Rotation::R0)),
        None => logits.clone(),
    }
}

/// Separate 3×3 convolutions over the stacked foreground and background maps.
#[derive(Debug, Clone)]
pub struct Fusion<T> {
    pub fg: Conv2d<T>,
    pub bg: Conv2d<T>,
}

pub struct FusionCache<T> {
    fg: ConvCache<T>,
    bg: ConvCache<T>,
}

impl<T: Real> Fusion<T> {
    /// Fusion over `branches` inputs, initialized to the plain average (centre tap `1/n`, zero bias).
    pub fn averaging(branches: usize) -> Self {
        let make = || {
            let mut conv = Conv2d::zeroed(ConvGeometry::new(branches, 1, 3).same());
            let share = T::one() / T::from_usize(branches).unwrap();
            for i in 0..branches {
                conv.weight.value[[0, i, 1, 1]] = share;
            }
            conv
        };
        Fusion { fg: make(), bg: make() }
    }

    pub fn branches(&self) -> usize {
        self.fg.geometry.in_channels
    }

    fn stack(&self, branches: &[&Array3<T>], channel: usize) -> Result<Array4<T>> {
        if branches.len() != self.branches() {
            return Err(FrinetError::ShapeMismatch {
                context: "branch fusion",
                expected: vec![self.branches()],
                found: vec![branches.len()],
            });
        }
        let dim = branches[0].dim();
        if let Some(bad) = branches.iter().find(|b| b.dim() != dim || b.dim().0 != 2) {
            return Err(FrinetError::ShapeMismatch {
                context: "branch fusion",
                expected: vec![2, dim.1, dim.2],
                found: bad.shape().to_vec(),
            });
        }
        let planes: Vec<_> = branches.iter().map(|b| b.index_axis(Axis(0), channel)).collect();
        Ok(ndarray::stack(Axis(0), &planes)
            .expect("uniform planes")
            .insert_axis(Axis(0)))
    }

    /// `[2, H, W]` branch logits (query frame) in, fused `[2, H, W]` logits out.
    pub fn forward(&self, branches: &[&Array3<T>]) -> Result<(Array3<T>, FusionCache<T>)> {
        let (f, fg) = self.fg.forward(&self.stack(branches, FG)?);
        let (b, bg) = self.bg.forward(&self.stack(branches, BG)?);
        let (_, _, h, w) = f.dim();
        let mut out = Array3::zeros((2, h, w));
        out.slice_mut(s![FG, .., ..]).assign(&f.slice(s![0, 0, .., ..]));
        out.slice_mut(s![BG, .., ..]).assign(&b.slice(s![0, 0, .., ..]));
        Ok((out, FusionCache { fg, bg }))
    }

    /// Returns the gradient with respect to each branch's logits.
    pub fn backward(&mut self, cache: &FusionCache<T>, dy: &Array3<T>) -> Vec<Array3<T>> {
        let lift = |c: usize| {
            dy.index_axis(Axis(0), c)
                .to_owned()
                .insert_axis(Axis(0))
                .insert_axis(Axis(0))
        };
        let df = self.fg.backward(&cache.fg, &lift(FG), true).expect("input grad");
        let db = self.bg.backward(&cache.bg, &lift(BG), true).expect("input grad");
        (0..self.branches())
            .map(|i| {
                ndarray::stack(Axis(0), &[df.slice(s![0, i, .., ..]), db.slice(s![0, i, .., ..])]).expect("planes")
            })
            .collect()
    }
}

impl<T: Real> Parameterized<T> for Fusion<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = prefixed("fg", self.fg.params());
        v.extend(prefixed("bg", self.bg.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = prefixed_mut("fg", self.fg.params_mut());
        v.extend(prefixed_mut("bg", self.bg.params_mut()));
        v
    }
}

/// Fuses branches that are already in the query frame.
pub fn fuse_branches<T: Real>(
    branches: &OrientationSet<BranchLogits<T>>,
    fusion: &Fusion<T>,
) -> Result<BranchLogits<T>> {
    let inputs: Vec<&Array3<T>> = branches.values().map(|b| &b.data).collect();
    let (out, _) = fusion.forward(&inputs)?;
    Ok(BranchLogits::new(out, None))
}

/// Mean two-class cross-entropy of the fused result, with its gradient.
pub fn main_loss<T: Real>(fused: &BranchLogits<T>, gt: &Array2<u8>) -> Result<(T, Array3<T>)> {
    binary_cross_entropy(fused.data.view(), gt.view())
}

/// Sum over branches of the mean cross-entropy of each unrotated branch, with per-branch gradients.
pub fn rotation_loss<T: Real>(
    branches: &OrientationSet<BranchLogits<T>>,
    gt: &Array2<u8>,
) -> Result<(T, OrientationSet<Array3<T>>)> {
    let mut total = T::zero();
    let grads = OrientationSet::try_from_rotations(&branches.rotations(), |r| {
        let b = branches.get(r).expect("listed");
        if b.orientation != Some(Rotation::R0) {
            return Err(FrinetError::Config(format!(
                "branch {r}° must be unrotated into the query frame before the rotation loss"
            )));
        }
        let (l, g) = binary_cross_entropy(b.data.view(), gt.view())?;
        total += l;
        Ok(g)
    })?;
    Ok((total, grads))
}

/// The composite objective and its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub loss_main: f64,
    pub loss_rotation: f64,
    pub loss_all: f64,
    pub mu: f64,
}

pub fn total_loss(main: f64, rotation: f64, mu: f64) -> Result<LossBundle> {
    if mu.is_nan() || mu < 0.0 {
        return Err(FrinetError::Config(format!("mu must be non-negative, got {mu}")));
    }
    Ok(LossBundle {
        loss_main: main,
        loss_rotation: rotation,
        loss_all: main + mu * rotation,
        mu,
    })
}

/// Foreground wherever the foreground logit is at least the background logit.
pub fn predict_mask<T: Real>(fused: &BranchLogits<T>) -> Array2<u8> {
    ndarray::Zip::from(fused.foreground())
        .and(fused.background())
        .map_collect(|&f, &b| u8::from(f >= b))
}
