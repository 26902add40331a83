//! Minimal layer library with hand-written backward passes.
//!
//! Tensors are `[N, C, H, W]` arrays in standard layout. Every layer exposes a
//! `forward` that returns its output together with whatever cache the backward
//! pass needs, and a `backward` that accumulates parameter gradients into the
//! layer's [`Param`]s and returns the input gradient.

mod conv;
mod loss;
mod norm;
mod ops;
mod optim;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use conv::{Conv2d, ConvCache, ConvGeometry};
pub use loss::{binary_cross_entropy, softmax_cross_entropy, BG, FG};
pub use norm::{BatchNorm2d, BatchNormCache, GroupNorm, GroupNormCache};
pub use ops::{
    adaptive_avg_pool, adaptive_avg_pool_backward, concat_channels, global_avg_pool, global_avg_pool_backward, relu,
    relu_backward, split_channels, Bilinear,
};
pub use optim::Sgd;

/// Floating point element type used by every layer.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A tensor together with its accumulated gradient and optimizer state.
///
/// Non-trainable tensors (normalization running statistics) are stored as
/// params too so they serialize alongside the weights; the optimizer skips them.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub trainable: bool,
    pub(crate) velocity: ArrayD<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: ArrayD::zeros(IxDyn(&shape)),
            trainable: true,
            velocity: ArrayD::zeros(IxDyn(&shape)),
        }
    }

    pub fn buffer(value: ArrayD<T>) -> Self {
        Param {
            trainable: false,
            ..Param::new(value)
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Param::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// He-normal initialization with the given fan-in.
    pub fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::of(normal.sample(rng))).collect();
        Param::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns named parameters.
pub trait Parameterized<T: Real> {
    fn params(&self) -> Vec<(String, &Param<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_trainable(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.len())
            .sum()
    }
}

pub(crate) fn prefixed<'a, T>(prefix: &str, items: Vec<(String, &'a Param<T>)>) -> Vec<(String, &'a Param<T>)> {
    items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

pub(crate) fn prefixed_mut<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a mut Param<T>)>,
) -> Vec<(String, &'a mut Param<T>)> {
    items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}
