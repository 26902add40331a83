use ndarray::{Array4, Axis};

use super::{Param, Parameterized, Real};

/// Group normalization with a per-channel affine transform.
#[derive(Debug, Clone)]
pub struct GroupNorm<T> {
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

pub struct GroupNormCache<T> {
    xhat: Array4<T>,
    inv_std: Vec<T>,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(
            groups > 0 && channels.is_multiple_of(groups),
            "{channels} channels cannot be split into {groups} groups"
        );
        GroupNorm {
            groups,
            channels,
            eps: 1e-5,
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, GroupNormCache<T>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "group norm channel mismatch");
        let per_group = c / self.groups;
        let m = T::from_usize(per_group * h * w).unwrap();
        let eps = T::of(self.eps);
        let mut xhat = x.as_standard_layout().into_owned();
        let mut inv_std = Vec::with_capacity(n * self.groups);
        let span = per_group * h * w;
        for mut sample in xhat.outer_iter_mut() {
            let data = sample.as_slice_mut().expect("standard layout");
            for chunk in data.chunks_mut(span) {
                let mean = chunk.iter().copied().sum::<T>() / m;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                let inv = T::one() / (var + eps).sqrt();
                chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                inv_std.push(inv);
            }
        }
        let mut y = xhat.clone();
        let gamma = self.gamma.value.as_slice().expect("contiguous");
        let beta = self.beta.value.as_slice().expect("contiguous");
        for mut sample in y.outer_iter_mut() {
            for (ci, mut plane) in sample.outer_iter_mut().enumerate() {
                let (g, b) = (gamma[ci], beta[ci]);
                plane.mapv_inplace(|v| v * g + b);
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache<T>, dy: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = dy.dim();
        let per_group = c / self.groups;
        let span = per_group * h * w;
        let hw = h * w;
        let m = T::from_usize(span).unwrap();
        let gamma = self.gamma.value.as_slice().expect("contiguous").to_vec();
        {
            let dgamma = self.gamma.grad.as_slice_mut().expect("contiguous");
            let dbeta = self.beta.grad.as_slice_mut().expect("contiguous");
            for i in 0..n {
                for ci in 0..c {
                    let d = dy.index_axis(Axis(0), i);
                    let d = d.index_axis(Axis(0), ci);
                    let xh = cache.xhat.index_axis(Axis(0), i);
                    let xh = xh.index_axis(Axis(0), ci);
                    dgamma[ci] += d.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    dbeta[ci] += d.sum();
                }
            }
        }
        let dy = dy.as_standard_layout();
        let mut dx = Array4::zeros((n, c, h, w));
        let src = dy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let out = dx.as_slice_mut().expect("fresh");
        for i in 0..n {
            for g in 0..self.groups {
                let start = i * c * hw + g * span;
                let inv = cache.inv_std[i * self.groups + g];
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for j in 0..span {
                    let ci = g * per_group + j / hw;
                    let dxh = src[start + j] * gamma[ci];
                    sum_d += dxh;
                    sum_dx += dxh * xh[start + j];
                }
                for j in 0..span {
                    let ci = g * per_group + j / hw;
                    let dxh = src[start + j] * gamma[ci];
                    out[start + j] = inv / m * (m * dxh - sum_d - xh[start + j] * sum_dx);
                }
            }
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for GroupNorm<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }
}

/// Batch normalization. Running statistics are stored as non-trainable params.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

pub struct BatchNormCache<T> {
    xhat: Array4<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(ndarray::ArrayD::zeros(ndarray::IxDyn(&[channels]))),
            running_var: Param::buffer(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[channels]), T::one())),
        }
    }

    /// Inference mode: normalizes with the running statistics.
    pub fn infer(&self, x: &Array4<T>) -> Array4<T> {
        let mut y = x.to_owned();
        let eps = T::of(self.eps);
        for ci in 0..self.channels {
            let mean = self.running_mean.value[[ci]];
            let inv = T::one() / (self.running_var.value[[ci]] + eps).sqrt();
            let (g, b) = (self.gamma.value[[ci]], self.beta.value[[ci]]);
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| (v - mean) * inv * g + b);
        }
        y
    }

    /// Training mode: batch statistics, running statistics updated in place.
    pub fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, BatchNormCache<T>) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let eps = T::of(self.eps);
        let mom = T::of(self.momentum);
        let mut xhat = x.to_owned();
        let mut inv_std = Vec::with_capacity(c);
        for ci in 0..c {
            let mut plane = xhat.index_axis_mut(Axis(1), ci);
            let mean = plane.sum() / T::of(m);
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(m);
            let inv = T::one() / (var + eps).sqrt();
            plane.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
            let unbiased = if m > 1.0 { var * T::of(m / (m - 1.0)) } else { var };
            let rm = &mut self.running_mean.value[[ci]];
            *rm = (T::one() - mom) * *rm + mom * mean;
            let rv = &mut self.running_var.value[[ci]];
            *rv = (T::one() - mom) * *rv + mom * unbiased;
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let (g, b) = (self.gamma.value[[ci]], self.beta.value[[ci]]);
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * g + b);
        }
        (y, BatchNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, dy: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = dy.dim();
        let m = T::from_usize(n * h * w).unwrap();
        let mut dx = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let d = dy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let dgamma = d.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
            let dbeta = d.sum();
            self.gamma.grad[[ci]] += dgamma;
            self.beta.grad[[ci]] += dbeta;
            let g = self.gamma.value[[ci]];
            let inv = cache.inv_std[ci];
            let mut out = dx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut out).and(&d).and(&xh).for_each(|o, &dv, &x| {
                *o = g * inv / m * (m * dv - dbeta - x * dgamma);
            });
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for BatchNorm2d<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![
            ("gamma".into(), &self.gamma),
            ("beta".into(), &self.beta),
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn group_norm_gradients() {
        let mut gn = GroupNorm::<f64>::new(2, 4);
        gn.gamma.value = ndarray::arr1(&[0.5, 1.5, -1.0, 2.0]).into_dyn();
        gn.beta.value = ndarray::arr1(&[0.1, 0.2, 0.3, 0.4]).into_dyn();
        let x = random((2, 4, 3, 3), 1);
        let r = random((2, 4, 3, 3), 2);
        let (_, cache) = gn.forward(&x);
        let dx = gn.backward(&cache, &r);
        let f = |x: &Array4<f64>| (gn.forward(x).0 * &r).sum();
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 3, 2, 1], [0, 2, 1, 1]] {
            let mut p = x.clone();
            p[idx] += eps;
            let mut m = x.clone();
            m[idx] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-7, "{fd} vs {}", dx[idx]);
        }
    }

    #[test]
    fn batch_norm_gradients_and_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(3);
        bn.gamma.value = ndarray::arr1(&[0.5, 1.5, -1.0]).into_dyn();
        let x = random((2, 3, 3, 2), 3);
        let r = random((2, 3, 3, 2), 4);
        let (_, cache) = bn.forward_train(&x);
        let dx = bn.backward(&cache, &r);
        let eps = 1e-6;
        let mut probe = bn.clone();
        let mut f = |x: &Array4<f64>| (probe.forward_train(x).0 * &r).sum();
        for idx in [[0, 0, 0, 0], [1, 2, 2, 1]] {
            let mut p = x.clone();
            p[idx] += eps;
            let mut m = x.clone();
            m[idx] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
        let mean0 = x.index_axis(Axis(1), 0).mean().unwrap();
        assert!((bn.running_mean.value[[0]] - 0.1 * mean0).abs() < 1e-12);
    }
}
