//! Rotation-adaptive matching.
//!
//! A support image seen at several orientations yields one prototype per
//! orientation. Every query pixel scores itself against all of them (cosine),
//! turns the scores into a soft assignment over orientations, and receives the
//! corresponding convex combination of prototypes as its matching feature.
//! A shared conv block then fuses matching and query features.

use log::warn;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;

use crate::backbone::FeatureMap;
use crate::data::{OrientationSet, Rotation};
use crate::error::{FrinetError, Result};
use crate::nn::{
    concat_channels, prefixed, prefixed_mut, relu, relu_backward, Conv2d, ConvCache, ConvGeometry, GroupNorm,
    GroupNormCache, Param, Parameterized, Real,
};

/// Added to the foreground count in masked pooling.
pub const POOL_EPS: f64 = 1e-6;
/// Lower clamp on vector norms in cosine scores.
pub const NORM_EPS: f64 = 1e-8;

/// Which support shot a prototype came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeSource {
    Shot(usize),
    Merged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype<T = f32> {
    pub vector: Array1<T>,
    pub orientation: Rotation,
    pub source: PrototypeSource,
}

/// Pre-softmax cosine scores, one plane per orientation in ascending angle order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMaps<T = f32> {
    pub maps: Array3<T>,
    pub orientations: Vec<Rotation>,
}

/// Per-pixel soft assignment over orientations; each column sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix<T = f32> {
    pub weights: Array3<T>,
    pub orientations: Vec<Rotation>,
}

/// Nearest-neighbour resampling of a label grid (`src = floor(dst * in / out)`).
pub fn downsample_mask(mask: &Array2<u8>, (h, w): (usize, usize)) -> Array2<u8> {
    let (mh, mw) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| mask[[y * mh / h, x * mw / w]])
}

/// Mean feature over foreground pixels; falls back to the global mean if none survive downsampling.
pub fn masked_average_pool<T: Real>(features: &FeatureMap<T>, mask: &Array2<u8>) -> Array1<T> {
    let (c, h, w) = features.data.dim();
    let small = downsample_mask(mask, (h, w));
    let count = small.iter().filter(|&&m| m == 1).count();
    let flat = features
        .data
        .view()
        .into_shape_with_order((c, h * w))
        .expect("feature map is contiguous");
    if count == 0 {
        warn!("support mask vanished at feature resolution {h}x{w}; using global average pooling");
        return flat.mean_axis(Axis(1)).expect("non-empty map");
    }
    let indicator = Array1::from_iter(small.iter().map(|&m| if m == 1 { T::one() } else { T::zero() }));
    flat.dot(&indicator) / (T::from_usize(count).unwrap() + T::of(POOL_EPS))
}

/// One prototype per orientation from correspondingly rotated features and masks.
pub fn orientation_prototypes<T: Real>(
    features: &OrientationSet<FeatureMap<T>>,
    masks: &OrientationSet<Array2<u8>>,
    shot: usize,
) -> Result<OrientationSet<Prototype<T>>> {
    OrientationSet::try_from_rotations(&features.rotations(), |r| {
        let f = features.get(r).expect("listed rotation");
        let m = masks
            .get(r)
            .ok_or_else(|| FrinetError::Config(format!("no support mask at {r}°")))?;
        Ok(Prototype {
            vector: masked_average_pool(f, m),
            orientation: r,
            source: PrototypeSource::Shot(shot),
        })
    })
}

/// Averages per-shot prototypes orientation by orientation.
pub fn merge_shots<T: Real>(shots: &[OrientationSet<Prototype<T>>]) -> Result<OrientationSet<Prototype<T>>> {
    let first = shots
        .first()
        .ok_or_else(|| FrinetError::Config("at least one support shot is required".into()))?;
    if shots.len() == 1 {
        return Ok(first.clone());
    }
    let k = T::from_usize(shots.len()).unwrap();
    let rotations = first.rotations();
    Ok(OrientationSet::from_rotations(&rotations, |r| {
        let mut sum = Array1::zeros(first.get(r).expect("listed").vector.len());
        for s in shots {
            sum += &s.get(r).expect("all shots share orientations").vector;
        }
        Prototype {
            vector: sum / k,
            orientation: r,
            source: PrototypeSource::Merged,
        }
    }))
}

fn prototype_matrix<T: Real>(prototypes: &OrientationSet<Prototype<T>>) -> Array2<T> {
    let c = prototypes.values().next().map_or(0, |p| p.vector.len());
    let mut m = Array2::zeros((c, prototypes.len()));
    for (o, p) in prototypes.values().enumerate() {
        m.column_mut(o).assign(&p.vector);
    }
    m
}

/// Cosine similarity of every query pixel with every prototype.
pub fn relation_scores<T: Real>(
    query: &FeatureMap<T>,
    prototypes: &OrientationSet<Prototype<T>>,
) -> Result<ScoreMaps<T>> {
    let (c, h, w) = query.data.dim();
    let p = prototype_matrix(prototypes);
    if p.nrows() != c {
        return Err(FrinetError::ShapeMismatch {
            context: "relation scores",
            expected: vec![p.nrows()],
            found: vec![c],
        });
    }
    let eps = T::of(NORM_EPS);
    let q = query
        .data
        .view()
        .into_shape_with_order((c, h * w))
        .expect("feature map is contiguous");
    let q_norm = q.map_axis(Axis(0), |col| col.dot(&col).sqrt().max(eps));
    let p_norm = p.map_axis(Axis(0), |col| col.dot(&col).sqrt().max(eps));
    let mut dots = Array2::zeros((p.ncols(), h * w));
    general_mat_mul(T::one(), &p.t(), &q, T::zero(), &mut dots);
    for (o, mut row) in dots.outer_iter_mut().enumerate() {
        for (v, &qn) in row.iter_mut().zip(q_norm.iter()) {
            *v = (*v / (p_norm[o] * qn)).max(-T::one()).min(T::one());
        }
    }
    Ok(ScoreMaps {
        maps: dots.into_shape_with_order((p.ncols(), h, w)).expect("contiguous"),
        orientations: prototypes.rotations(),
    })
}

/// Softmax over the orientation axis at every pixel, no temperature.
pub fn relation_softmax<T: Real>(scores: &ScoreMaps<T>) -> RelationMatrix<T> {
    let mut weights = scores.maps.clone();
    for mut lane in weights.lanes_mut(Axis(0)) {
        let m = lane.fold(T::neg_infinity(), |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - m).exp());
        let z = lane.sum();
        lane.mapv_inplace(|v| v / z);
    }
    RelationMatrix {
        weights,
        orientations: scores.orientations.clone(),
    }
}

/// `F_r = P · W`: `(C × n) · (n × HW)` reshaped to `C × H × W`.
pub fn aggregate_matching_features<T: Real>(
    prototypes: &OrientationSet<Prototype<T>>,
    relations: &RelationMatrix<T>,
) -> Result<Array3<T>> {
    let (n, h, w) = relations.weights.dim();
    if n != prototypes.len() {
        return Err(FrinetError::ShapeMismatch {
            context: "matching aggregation",
            expected: vec![prototypes.len()],
            found: vec![n],
        });
    }
    let p = prototype_matrix(prototypes);
    let weights = relations
        .weights
        .view()
        .into_shape_with_order((n, h * w))
        .expect("contiguous");
    let mut out = Array2::zeros((p.nrows(), h * w));
    general_mat_mul(T::one(), &p, &weights, T::zero(), &mut out);
    Ok(out.into_shape_with_order((p.nrows(), h, w)).expect("contiguous"))
}

/// Largest group count ≤ 8 that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|&g| channels.is_multiple_of(g))
        .unwrap_or(1)
}

/// `conv3x3(2C → C) → GroupNorm → ReLU → conv3x3(C → C)` over `[F_r; F_q]`.
#[derive(Debug, Clone)]
pub struct ActivationBlock<T> {
    pub conv1: Conv2d<T>,
    pub norm: GroupNorm<T>,
    pub conv2: Conv2d<T>,
}

pub struct ActivationCache<T> {
    conv1: ConvCache<T>,
    norm: GroupNormCache<T>,
    hidden: Array4<T>,
    conv2: ConvCache<T>,
}

impl<T: Real> ActivationBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut conv2 = Conv2d::new(ConvGeometry::new(channels, channels, 3).same(), rng);
        conv2.bias.value.fill(T::zero());
        ActivationBlock {
            conv1: Conv2d::new(ConvGeometry::new(2 * channels, channels, 3).same(), rng),
            norm: GroupNorm::new(group_count(channels), channels),
            conv2,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv2.geometry.out_channels
    }

    fn check(&self, matching: &Array4<T>, query: &Array4<T>) -> Result<()> {
        let c = self.channels();
        if matching.dim() != query.dim() || query.dim().1 != c {
            return Err(FrinetError::ShapeMismatch {
                context: "query activation",
                expected: vec![query.dim().0, c, query.dim().2, query.dim().3],
                found: matching.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `[N, C, H, W]` matching and query features in, activated features out.
    pub fn forward(&self, matching: &Array4<T>, query: &Array4<T>) -> Result<(Array4<T>, ActivationCache<T>)> {
        self.check(matching, query)?;
        let (z, conv1) = self.conv1.forward(&concat_channels(&[matching, query]));
        let (z, norm) = self.norm.forward(&z);
        let hidden = relu(&z);
        let (out, conv2) = self.conv2.forward(&hidden);
        Ok((
            out,
            ActivationCache {
                conv1,
                norm,
                hidden,
                conv2,
            },
        ))
    }

    /// Accumulates parameter gradients; the inputs are frozen features, so no input gradient is returned.
    pub fn backward(&mut self, cache: &ActivationCache<T>, dy: &Array4<T>) {
        let d = self.conv2.backward(&cache.conv2, dy, true).expect("input grad");
        let d = relu_backward(&cache.hidden, &d);
        let d = self.norm.backward(&cache.norm, &d);
        self.conv1.backward(&cache.conv1, &d, false);
    }

    /// Intermediate post-ReLU activations, for inspection.
    pub fn hidden<'a>(&self, cache: &'a ActivationCache<T>) -> &'a Array4<T> {
        &cache.hidden
    }
}

/// Activates one query feature map against its matching features.
pub fn activate_query<T: Real>(
    block: &ActivationBlock<T>,
    matching: &Array3<T>,
    query: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    let m = matching.view().insert_axis(Axis(0)).to_owned();
    let q = query.data.view().insert_axis(Axis(0)).to_owned();
    let (out, _) = block.forward(&m, &q)?;
    Ok(FeatureMap::new(out.index_axis_move(Axis(0), 0), query.stride))
}

impl<T: Real> Parameterized<T> for ActivationBlock<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = prefixed("conv1", self.conv1.params());
        v.extend(prefixed("norm", self.norm.params()));
        v.extend(prefixed("conv2", self.conv2.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = prefixed_mut("conv1", self.conv1.params_mut());
        v.extend(prefixed_mut("norm", self.norm.params_mut()));
        v.extend(prefixed_mut("conv2", self.conv2.params_mut()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fm(data: Array3<f64>) -> FeatureMap<f64> {
        FeatureMap::new(data, 1)
    }

    fn protos(vectors: &[Array1<f64>]) -> OrientationSet<Prototype<f64>> {
        OrientationSet::from_entries(
            vectors
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let r = Rotation::ALL[i];
                    (
                        r,
                        Prototype {
                            vector: v.clone(),
                            orientation: r,
                            source: PrototypeSource::Merged,
                        },
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn pooling_hand_sums() {
        let f = fm(array![[[1.0, 2.0], [3.0, 4.0]]]);
        let p = masked_average_pool(&f, &array![[1u8, 0], [0, 1]]);
        assert!((p[0] - 2.5).abs() < 1e-5);
        let full = masked_average_pool(&f, &Array2::ones((2, 2)));
        assert!((full[0] - 2.5).abs() < 1e-5);
        let constant = fm(Array3::from_elem((3, 4, 4), 1.5));
        let p = masked_average_pool(&constant, &Array2::from_shape_fn((8, 8), |(y, _)| (y < 2) as u8));
        assert!(p.iter().all(|v| (v - 1.5).abs() < 1e-5));
    }

    #[test]
    fn ignore_pixels_do_not_count_and_empty_masks_fall_back() {
        let f = fm(array![[[1.0, 2.0], [3.0, 4.0]]]);
        let p = masked_average_pool(&f, &array![[255u8, 1], [255, 255]]);
        assert!((p[0] - 2.0).abs() < 1e-5);
        let p = masked_average_pool(&f, &Array2::zeros((2, 2)));
        assert_eq!(p[0], 2.5);
    }

    #[test]
    fn k_shot_prototypes_are_per_orientation_means() {
        let a = protos(&[array![1.0, 0.0], array![2.0, 2.0]]);
        let b = protos(&[array![3.0, 4.0], array![0.0, 2.0]]);
        let m = merge_shots(&[a, b]).unwrap();
        assert_eq!(m.at_0().unwrap().vector, array![2.0, 2.0]);
        assert_eq!(m.at_90().unwrap().vector, array![1.0, 2.0]);
        assert_eq!(m.at_90().unwrap().source, PrototypeSource::Merged);
    }

    #[test]
    fn cosine_extremes_and_zero_vectors() {
        let p0 = array![0.3, -1.2, 2.0];
        let set = protos(&[
            p0.clone(),
            array![1.0, 0.0, 0.0],
            array![0.0, 1.0, 0.0],
            array![0.0, 0.0, 1.0],
        ]);
        let q = Array3::from_shape_fn((3, 1, 3), |(c, _, x)| match x {
            0 => p0[c],
            1 => -p0[c],
            _ => 0.0,
        });
        let s = relation_scores(&fm(q), &set).unwrap();
        assert!((s.maps[[0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!((s.maps[[0, 0, 1]] + 1.0).abs() < 1e-12);
        assert!((0..4).all(|o| s.maps[[o, 0, 2]] == 0.0));
    }

    #[test]
    fn softmax_closed_form_and_symmetry() {
        let maps = Array3::from_shape_vec((4, 1, 2), vec![1.0, 0.2, -1.0, 0.2, -1.0, 0.2, -1.0, 0.2]).unwrap();
        let r = relation_softmax(&ScoreMaps {
            maps,
            orientations: Rotation::ALL.to_vec(),
        });
        let e = std::f64::consts::E;
        assert!((r.weights[[0, 0, 0]] - e / (e + 3.0 / e)).abs() < 1e-12);
        for o in 0..4 {
            assert!((r.weights[[o, 0, 1]] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_hits_simplex_vertices() {
        let set = protos(&[array![1.0, 2.0], array![-3.0, 0.5], array![0.0, 0.0], array![4.0, 4.0]]);
        let mut weights = Array3::zeros((4, 1, 1));
        weights[[1, 0, 0]] = 1.0;
        let f = aggregate_matching_features(
            &set,
            &RelationMatrix {
                weights,
                orientations: Rotation::ALL.to_vec(),
            },
        )
        .unwrap();
        assert_eq!(f[[0, 0, 0]], -3.0);
        assert_eq!(f[[1, 0, 0]], 0.5);
    }

    #[test]
    fn activation_block_shape_and_dead_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = ActivationBlock::<f64>::new(6, &mut rng);
        let zeros = Array4::zeros((1, 6, 5, 7));
        let (out, cache) = block.forward(&zeros, &zeros).unwrap();
        assert_eq!(out.dim(), (1, 6, 5, 7));
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(block.hidden(&cache).iter().all(|&v| v >= 0.0));
        let bad = Array4::zeros((1, 5, 5, 7));
        assert!(block.forward(&bad, &zeros).is_err());
    }

    #[test]
    fn activation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = ActivationBlock::<f64>::new(4, &mut rng);
        let m = Array4::from_shape_fn((1, 4, 5, 5), |_| rng.random_range(-1.0..1.0));
        let q = Array4::from_shape_fn((1, 4, 5, 5), |_| rng.random_range(-1.0..1.0));
        let probe = Array4::from_shape_fn((1, 4, 5, 5), |_| rng.random_range(-1.0..1.0));
        let loss = |b: &ActivationBlock<f64>| (&b.forward(&m, &q).unwrap().0 * &probe).sum();
        let (_, cache) = block.forward(&m, &q).unwrap();
        block.backward(&cache, &probe);
        let eps = 1e-5;
        for idx in [[0, 0, 0, 0], [3, 7, 2, 1], [1, 5, 1, 1]] {
            let analytic = block.conv1.weight.grad[idx];
            let mut p = block.clone();
            p.conv1.weight.value[idx] += eps;
            let mut n = block.clone();
            n.conv1.weight.value[idx] -= eps;
            let fd = (loss(&p) - loss(&n)) / (2.0 * eps);
            assert!(
                (fd - analytic).abs() <= 1e-4 * fd.abs().max(analytic.abs()).max(1e-6),
                "{fd} vs {analytic}"
            );
        }
    }

    fn brute_force(set: &OrientationSet<Prototype<f64>>, w: &Array3<f64>) -> Array3<f64> {
        let (n, h, wd) = w.dim();
        let c = set.values().next().unwrap().vector.len();
        let protos: Vec<_> = set.values().collect();
        Array3::from_shape_fn((c, h, wd), |(ci, y, x)| {
            let mut acc = 0.0;
            for o in 0..n {
                acc += w[[o, y, x]] * protos[o].vector[ci];
            }
            acc
        })
    }

    proptest! {
        #[test]
        fn aggregation_matches_loop_and_stays_in_hull(c in 1usize..=16, h in 1usize..=8, w in 1usize..=8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vectors: Vec<Array1<f64>> = (0..4).map(|_| Array1::from_shape_fn(c, |_| rng.random_range(-2.0..2.0))).collect();
            let set = protos(&vectors);
            let q = Array3::from_shape_fn((c, h, w), |_| rng.random_range(-2.0..2.0));
            let rel = relation_softmax(&relation_scores(&fm(q), &set).unwrap());
            for lane in rel.weights.lanes(Axis(0)) {
                prop_assert!((lane.sum() - 1.0).abs() <= 1e-6 && lane.iter().all(|&v| v >= 0.0));
            }
            let fast = aggregate_matching_features(&set, &rel).unwrap();
            let slow = brute_force(&set, &rel.weights);
            prop_assert!((&fast - &slow).iter().all(|d| d.abs() <= 1e-6));
            for ci in 0..c {
                let lo = vectors.iter().map(|v| v[ci]).fold(f64::INFINITY, f64::min);
                let hi = vectors.iter().map(|v| v[ci]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(fast.index_axis(Axis(0), ci).iter().all(|&v| v >= lo - 1e-5 && v <= hi + 1e-5));
            }
        }
    }
}
