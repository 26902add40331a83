use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::FeatureMap;
use crate::data::{rotate, OrientationSet, Rotation};
use crate::error::{FrinetError, Result};
use crate::nn::{prefixed, prefixed_mut, Param, Parameterized, Real};
use crate::rothead::{
    main_loss, rotation_loss, total_loss, unrotate_logits, BranchLogits, DecodeCache, DecodeHead, Fusion, FusionCache,
    LossBundle,
};
use crate::rotmatch::{
    aggregate_matching_features, merge_shots, orientation_prototypes, relation_scores, relation_softmax,
    ActivationBlock, ActivationCache, Prototype, RelationMatrix, ScoreMaps,
};

/// RNG stream used for parameter initialization.
pub(crate) const INIT_STREAM: u64 = 1;

/// Frozen features for one episode, already expanded over the configured orientations.
#[derive(Debug, Clone)]
pub struct EpisodeInputs<T = f32> {
    /// Per shot: rotated support features paired with the identically rotated binary mask.
    pub supports: Vec<OrientationSet<(FeatureMap<T>, Array2<u8>)>>,
    /// Features of the rotated query images.
    pub queries: OrientationSet<FeatureMap<T>>,
    /// Unrotated query image size.
    pub query_hw: (usize, usize),
}

/// Everything the forward pass produces that is worth inspecting.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T = f32> {
    pub fused: BranchLogits<T>,
    /// Branch logits rotated back into the query frame.
    pub branches: OrientationSet<BranchLogits<T>>,
    pub prototypes: OrientationSet<Prototype<T>>,
    /// Scores and relations per query branch, in that branch's rotated frame.
    pub scores: OrientationSet<ScoreMaps<T>>,
    pub relations: OrientationSet<RelationMatrix<T>>,
}

pub struct ForwardCache<T> {
    branches: Vec<(Rotation, ActivationCache<T>, DecodeCache<T>)>,
    fusion: FusionCache<T>,
}

/// The learnable part of the network: activation block, decode head and fusion.
#[derive(Debug, Clone)]
pub struct FrinetModel<T = f32> {
    pub orientations: Vec<Rotation>,
    pub activation: ActivationBlock<T>,
    pub head: DecodeHead<T>,
    pub fusion: Fusion<T>,
}

fn finite<T: Real>(values: impl IntoIterator<Item = T>, stage: &'static str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FrinetError::NonFinite(stage))
    }
}

fn rotated_hw((h, w): (usize, usize), r: Rotation) -> (usize, usize) {
    if r.swaps_axes() {
        (w, h)
    } else {
        (h, w)
    }
}

impl<T: Real> FrinetModel<T> {
    pub fn new(channels: usize, head_width: usize, orientations: &[Rotation], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut orientations = orientations.to_vec();
        orientations.sort();
        FrinetModel {
            activation: ActivationBlock::new(channels, &mut rng),
            head: DecodeHead::new(channels, head_width, &mut rng),
            fusion: Fusion::averaging(orientations.len()),
            orientations,
        }
    }

    pub fn channels(&self) -> usize {
        self.activation.channels()
    }

    pub fn forward(&self, inputs: &EpisodeInputs<T>) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
        if inputs.queries.rotations() != self.orientations {
            return Err(FrinetError::Config(format!(
                "episode carries orientations {:?}, model expects {:?}",
                inputs.queries.rotations(),
                self.orientations
            )));
        }
        let per_shot = inputs
            .supports
            .iter()
            .enumerate()
            .map(|(k, shot)| {
                let feats = shot.map(|_, (f, _)| f.clone());
                let masks = shot.map(|_, (_, m)| m.clone());
                orientation_prototypes(&feats, &masks, k)
            })
            .collect::<Result<Vec<_>>>()?;
        let prototypes = merge_shots(&per_shot)?;
        finite(prototypes.values().flat_map(|p| p.vector.iter().copied()), "prototypes")?;

        let mut scores = Vec::new();
        let mut relations = Vec::new();
        let mut branches = Vec::new();
        let mut caches = Vec::new();
        for (r, q) in inputs.queries.iter() {
            let s = relation_scores(q, &prototypes)?;
            finite(s.maps.iter().copied(), "relation scores")?;
            let rel = relation_softmax(&s);
            let matching = aggregate_matching_features(&prototypes, &rel)?;
            let m4 = matching.insert_axis(Axis(0));
            let q4 = q.data.view().insert_axis(Axis(0)).to_owned();
            let (activated, act_cache) = self.activation.forward(&m4, &q4)?;
            finite(activated.iter().copied(), "query activation")?;
            let (logits, dec_cache) = self.head.forward(&activated, rotated_hw(inputs.query_hw, r))?;
            finite(logits.iter().copied(), "decode head")?;
            let tagged = BranchLogits::new(logits.index_axis_move(Axis(0), 0), Some(r));
            branches.push((r, unrotate_logits(&tagged)));
            scores.push((r, s));
            relations.push((r, rel));
            caches.push((r, act_cache, dec_cache));
        }
        let branches = OrientationSet::from_entries(branches);
        let inputs_ref: Vec<&Array3<T>> = branches.values().map(|b| &b.data).collect();
        let (fused, fusion_cache) = self.fusion.forward(&inputs_ref)?;
        finite(fused.iter().copied(), "fusion")?;
        Ok((
            ForwardOutput {
                fused: BranchLogits::new(fused, None),
                branches,
                prototypes,
                scores: OrientationSet::from_entries(scores),
                relations: OrientationSet::from_entries(relations),
            },
            ForwardCache {
                branches: caches,
                fusion: fusion_cache,
            },
        ))
    }

    pub fn infer(&self, inputs: &EpisodeInputs<T>) -> Result<ForwardOutput<T>> {
        Ok(self.forward(inputs)?.0)
    }

    /// Backpropagates gradients of the fused logits and of each (query-frame) branch.
    pub fn backward(&mut self, cache: &ForwardCache<T>, d_fused: &Array3<T>, d_branches: &OrientationSet<Array3<T>>) {
        let from_fusion = self.fusion.backward(&cache.fusion, d_fused);
        for ((r, act_cache, dec_cache), mut g) in cache.branches.iter().zip(from_fusion) {
            if let Some(extra) = d_branches.get(*r) {
                g += extra;
            }
            let g = rotate(g.view(), *r).insert_axis(Axis(0));
            let d_act: Array4<T> = self.head.backward(dec_cache, &g);
            self.activation.backward(act_cache, &d_act);
        }
    }

    /// Forward, composite loss and backward for one episode; gradients accumulate into the params.
    pub fn accumulate_gradients(&mut self, inputs: &EpisodeInputs<T>, gt: &Array2<u8>, mu: f64) -> Result<LossBundle> {
        let (out, cache) = self.forward(inputs)?;
        let (bundle, d_fused, d_branches) = losses(&out, gt, mu)?;
        self.backward(&cache, &d_fused, &d_branches);
        Ok(bundle)
    }
}

/// Composite loss of a forward output and its gradients with respect to the fused and branch logits.
pub fn losses<T: Real>(
    out: &ForwardOutput<T>,
    gt: &Array2<u8>,
    mu: f64,
) -> Result<(LossBundle, Array3<T>, OrientationSet<Array3<T>>)> {
    let (main, d_fused) = main_loss(&out.fused, gt)?;
    let (rot, d_rot) = rotation_loss(&out.branches, gt)?;
    let bundle = total_loss(main.to_f64_lossy(), rot.to_f64_lossy(), mu)?;
    let scale = T::of(mu);
    Ok((bundle, d_fused, d_rot.map(|_, g| g * scale)))
}

impl<T: Real> Parameterized<T> for FrinetModel<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = prefixed("activation", self.activation.params());
        v.extend(prefixed("head", self.head.params()));
        v.extend(prefixed("fusion", self.fusion.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = prefixed_mut("activation", self.activation.params_mut());
        v.extend(prefixed_mut("head", self.head.params_mut()));
        v.extend(prefixed_mut("fusion", self.fusion.params_mut()));
        v
    }
}
