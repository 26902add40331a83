use super::{Parameterized, Real};

/// SGD with heavy-ball momentum (`v = m·v + g; p -= lr·v`).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            weight_decay: 0.0,
        }
    }

    /// Applies one update with gradients scaled by `grad_scale`, then clears them.
    pub fn step<T: Real, M: Parameterized<T> + ?Sized>(&self, model: &mut M, lr: f64, grad_scale: f64) {
        let (lr, mom, wd, scale) = (
            T::of(lr),
            T::of(self.momentum),
            T::of(self.weight_decay),
            T::of(grad_scale),
        );
        for (_, p) in model.params_mut() {
            if !p.trainable {
                continue;
            }
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.velocity)
                .and(&p.grad)
                .for_each(|w, v, &g| {
                    let g = g * scale + wd * *w;
                    *v = mom * *v + g;
                    *w -= lr * *v;
                });
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct Quad(Param<f64>);

    impl Parameterized<f64> for Quad {
        fn params(&self) -> Vec<(String, &Param<f64>)> {
            vec![("x".into(), &self.0)]
        }
        fn params_mut(&mut self) -> Vec<(String, &mut Param<f64>)> {
            vec![("x".into(), &mut self.0)]
        }
    }

    #[test]
    fn momentum_sgd_minimizes_quadratic() {
        let mut q = Quad(Param::filled(&[1], 4.0));
        let sgd = Sgd::new(0.9);
        for _ in 0..300 {
            let x = q.0.value[[0]];
            q.0.grad[[0]] = 2.0 * x;
            sgd.step(&mut q, 0.05, 1.0);
        }
        assert!(q.0.value[[0]].abs() < 1e-3);
    }
}
