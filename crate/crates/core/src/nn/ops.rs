use ndarray::{concatenate, s, Array4, Axis};

use super::Real;

pub fn relu<T: Real>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its *output*.
pub fn relu_backward<T: Real>(y: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

pub fn concat_channels<T: Real>(parts: &[&Array4<T>]) -> Array4<T> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(1), &views).expect("concat along channels")
}

/// Splits a channel-concatenated gradient back into pieces of the given widths.
pub fn split_channels<T: Real>(x: &Array4<T>, widths: &[usize]) -> Vec<Array4<T>> {
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let part = x.slice(s![.., start..start + w, .., ..]).to_owned();
            start += w;
            part
        })
        .collect()
}

pub fn global_avg_pool<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let denom = T::from_usize(h * w).unwrap();
    Array4::from_shape_fn((n, c, 1, 1), |(i, ci, _, _)| x.slice(s![i, ci, .., ..]).sum() / denom)
}

pub fn global_avg_pool_backward<T: Real>(dy: &Array4<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c, _, _) = dy.dim();
    let denom = T::from_usize(h * w).unwrap();
    Array4::from_shape_fn((n, c, h, w), |(i, ci, _, _)| dy[[i, ci, 0, 0]] / denom)
}

fn bin_range(i: usize, bins: usize, len: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end.max(start + 1))
}

/// Adaptive average pooling to a `bins × bins` grid (PyTorch bin edges).
pub fn adaptive_avg_pool<T: Real>(x: &Array4<T>, bins: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, bins, bins), |(i, ci, by, bx)| {
        let (y0, y1) = bin_range(by, bins, h);
        let (x0, x1) = bin_range(bx, bins, w);
        let cell = x.slice(s![i, ci, y0..y1, x0..x1]);
        cell.sum() / T::from_usize(cell.len()).unwrap()
    })
}

pub fn adaptive_avg_pool_backward<T: Real>(dy: &Array4<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c, bins, _) = dy.dim();
    let mut dx = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for ci in 0..c {
            for by in 0..bins {
                for bx in 0..bins {
                    let (y0, y1) = bin_range(by, bins, h);
                    let (x0, x1) = bin_range(bx, bins, w);
                    let share = dy[[i, ci, by, bx]] / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                    dx.slice_mut(s![i, ci, y0..y1, x0..x1]).mapv_inplace(|v| v + share);
                }
            }
        }
    }
    dx
}

/// Bilinear resampling with half-pixel centers (`align_corners = false`).
#[derive(Debug, Clone)]
pub struct Bilinear {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    rows: Vec<(usize, usize, f64, f64)>,
    cols: Vec<(usize, usize, f64, f64)>,
}

fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

impl Bilinear {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        Bilinear {
            in_hw,
            out_hw,
            rows: axis_taps(in_hw.0, out_hw.0),
            cols: axis_taps(in_hw.1, out_hw.1),
        }
    }

    pub fn forward<T: Real>(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!((h, w), self.in_hw, "bilinear input size");
        let (oh, ow) = self.out_hw;
        let mut out = Array4::zeros((n, c, oh, ow));
        for i in 0..n {
            for ci in 0..c {
                let src = x.slice(s![i, ci, .., ..]);
                let mut dst = out.slice_mut(s![i, ci, .., ..]);
                for (oy, &(y0, y1, wy0, wy1)) in self.rows.iter().enumerate() {
                    let (wy0, wy1) = (T::of(wy0), T::of(wy1));
                    for (ox, &(x0, x1, wx0, wx1)) in self.cols.iter().enumerate() {
                        let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                        dst[[oy, ox]] = wy0 * (wx0 * src[[y0, x0]] + wx1 * src[[y0, x1]])
                            + wy1 * (wx0 * src[[y1, x0]] + wx1 * src[[y1, x1]]);
                    }
                }
            }
        }
        out
    }

    pub fn backward<T: Real>(&self, dy: &Array4<T>) -> Array4<T> {
        let (n, c, _, _) = dy.dim();
        let (h, w) = self.in_hw;
        let mut dx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for ci in 0..c {
                let g = dy.slice(s![i, ci, .., ..]);
                let mut dst = dx.slice_mut(s![i, ci, .., ..]);
                for (oy, &(y0, y1, wy0, wy1)) in self.rows.iter().enumerate() {
                    let (wy0, wy1) = (T::of(wy0), T::of(wy1));
                    for (ox, &(x0, x1, wx0, wx1)) in self.cols.iter().enumerate() {
                        let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                        let v = g[[oy, ox]];
                        dst[[y0, x0]] += v * wy0 * wx0;
                        dst[[y0, x1]] += v * wy0 * wx1;
                        dst[[y1, x0]] += v * wy1 * wx0;
                        dst[[y1, x1]] += v * wy1 * wx1;
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_preserves_constants_and_is_adjoint() {
        let up = Bilinear::new((3, 4), (12, 16));
        let x = Array4::<f64>::from_elem((1, 2, 3, 4), 2.5);
        assert!(up.forward(&x).iter().all(|&v| (v - 2.5).abs() < 1e-12));

        let a = Array4::<f64>::from_shape_fn((1, 1, 3, 4), |(_, _, y, x)| (y * 4 + x) as f64);
        let b = Array4::<f64>::from_shape_fn((1, 1, 12, 16), |(_, _, y, x)| ((y * 7 + x * 3) % 5) as f64);
        let lhs = (up.forward(&a) * &b).sum();
        let rhs = (up.backward(&b) * &a).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn adaptive_pool_bins_cover_input() {
        let x = Array4::<f64>::from_shape_fn((1, 1, 16, 16), |(_, _, y, x)| (y * 16 + x) as f64);
        for bins in [1, 2, 3, 6] {
            let p = adaptive_avg_pool(&x, bins);
            assert_eq!(p.dim(), (1, 1, bins, bins));
            let ones = Array4::from_elem((1, 1, bins, bins), 1.0);
            let back = adaptive_avg_pool_backward(&ones, 16, 16);
            assert!(back.iter().all(|&v| v > 0.0));
        }
        assert!((adaptive_avg_pool(&x, 1)[[0, 0, 0, 0]] - 127.5).abs() < 1e-12);
    }

    #[test]
    fn relu_gradient_masks_inactive_units() {
        let x = Array4::from_shape_vec((1, 1, 1, 4), vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let y = relu(&x);
        let dx = relu_backward(&y, &Array4::from_elem((1, 1, 1, 4), 1.0));
        assert_eq!(dx.iter().copied().collect::<Vec<f64>>(), vec![0.0, 0.0, 1.0, 1.0]);
    }
}
