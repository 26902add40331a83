use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::Rng;

use super::{Param, Parameterized, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// `padding = dilation * (kernel - 1) / 2`, preserving spatial size at stride 1.
    pub fn same(mut self) -> Self {
        self.padding = self.dilation * (self.kernel - 1) / 2;
        self
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let oh = (h + 2 * self.padding).saturating_sub(span) / self.stride + 1;
        let ow = (w + 2 * self.padding).saturating_sub(span) / self.stride + 1;
        (oh, ow)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// 2-D convolution (cross-correlation) with bias, stride, zero padding and dilation.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub geometry: ConvGeometry,
    /// `[out, in, k, k]`
    pub weight: Param<T>,
    /// `[out]`
    pub bias: Param<T>,
}

pub struct ConvCache<T> {
    cols: Vec<Array2<T>>,
    input_hw: (usize, usize),
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(geometry: ConvGeometry, rng: &mut R) -> Self {
        let g = geometry;
        Conv2d {
            geometry: g,
            weight: Param::kaiming(&[g.out_channels, g.in_channels, g.kernel, g.kernel], g.patch_len(), rng),
            bias: Param::zeros(&[g.out_channels]),
        }
    }

    pub fn zeroed(geometry: ConvGeometry) -> Self {
        let g = geometry;
        Conv2d {
            geometry: g,
            weight: Param::zeros(&[g.out_channels, g.in_channels, g.kernel, g.kernel]),
            bias: Param::zeros(&[g.out_channels]),
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.geometry.out_channels, self.geometry.patch_len()))
            .expect("conv weight is contiguous")
    }

    fn check_input(&self, x: &Array4<T>) {
        assert_eq!(x.shape()[1], self.geometry.in_channels, "conv input channel mismatch");
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, ConvCache<T>) {
        self.check_input(x);
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.geometry.output_size(h, w);
        let mut out = Array4::zeros((n, self.geometry.out_channels, oh, ow));
        let mut cols = Vec::with_capacity(n);
        for (i, mut out_i) in out.outer_iter_mut().enumerate() {
            let col = im2col(&self.geometry, x, i, oh, ow);
            self.apply(
                &col,
                out_i
                    .view_mut()
                    .into_shape_with_order((self.geometry.out_channels, oh * ow))
                    .expect("fresh output"),
            );
            cols.push(col);
        }
        (out, ConvCache { cols, input_hw: (h, w) })
    }

    /// Forward pass without keeping the im2col buffers.
    pub fn infer(&self, x: &Array4<T>) -> Array4<T> {
        self.check_input(x);
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.geometry.output_size(h, w);
        let mut out = Array4::zeros((n, self.geometry.out_channels, oh, ow));
        for (i, mut out_i) in out.outer_iter_mut().enumerate() {
            let col = im2col(&self.geometry, x, i, oh, ow);
            self.apply(
                &col,
                out_i
                    .view_mut()
                    .into_shape_with_order((self.geometry.out_channels, oh * ow))
                    .expect("fresh output"),
            );
        }
        out
    }

    fn apply(&self, col: &Array2<T>, mut out: ndarray::ArrayViewMut2<'_, T>) {
        general_mat_mul(T::one(), &self.weight_matrix(), col, T::zero(), &mut out);
        let bias = self.bias.value.as_slice().expect("contiguous bias");
        for (mut row, &b) in out.outer_iter_mut().zip(bias) {
            row.mapv_inplace(|v| v + b);
        }
    }

    /// Accumulates weight/bias gradients; returns the input gradient when requested.
    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Array4<T>, need_input_grad: bool) -> Option<Array4<T>> {
        let g = self.geometry;
        let (n, _, oh, ow) = dy.dim();
        let (h, w) = cache.input_hw;
        let k = g.patch_len();
        let mut dx = need_input_grad.then(|| Array4::zeros((n, g.in_channels, h, w)));
        let mut dw = Array2::<T>::zeros((g.out_channels, k));
        let mut dcol = Array2::<T>::zeros((k, oh * ow));
        for i in 0..n {
            let dy_i = dy
                .index_axis(Axis(0), i)
                .into_shape_with_order((g.out_channels, oh * ow))
                .expect("contiguous gradient");
            general_mat_mul(T::one(), &dy_i, &cache.cols[i].t(), T::one(), &mut dw);
            {
                let db = self.bias.grad.as_slice_mut().expect("contiguous");
                for (o, row) in dy_i.outer_iter().enumerate() {
                    db[o] += row.sum();
                }
            }
            if let Some(dx) = dx.as_mut() {
                general_mat_mul(T::one(), &self.weight_matrix().t(), &dy_i, T::zero(), &mut dcol);
                col2im(&g, &dcol, dx, i, oh, ow);
            }
        }
        let mut wg = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order((g.out_channels, k))
            .expect("contiguous");
        wg += &dw;
        dx
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Output indices `lo..hi` whose kernel tap `t` lands inside the input, and the input index of `lo`.
#[inline]
fn tap_range(t: usize, g: &ConvGeometry, out_len: usize, in_len: usize) -> (usize, usize, usize) {
    let offset = (t * g.dilation) as isize - g.padding as isize;
    let s = g.stride as isize;
    // smallest o with o*s + offset >= 0
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset + s - 1) / s) as usize
    };
    // smallest o with o*s + offset >= in_len
    let end = in_len as isize - offset;
    let hi = if end <= 0 { 0 } else { ((end + s - 1) / s) as usize };
    let hi = hi.min(out_len);
    if lo >= hi {
        return (0, 0, 0);
    }
    (lo, hi, (lo as isize * s + offset) as usize)
}

fn im2col<T: Real>(g: &ConvGeometry, x: &Array4<T>, n: usize, oh: usize, ow: usize) -> Array2<T> {
    let (_, c, h, w) = x.dim();
    let xs = x.index_axis(Axis(0), n);
    let xs = xs.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let k = g.kernel;
    let mut col = Array2::<T>::zeros((c * k * k, oh * ow));
    let dst = col.as_slice_mut().expect("fresh array");
    let plane = oh * ow;
    for ci in 0..c {
        let chan = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi, iy0) = tap_range(ky, g, oh, h);
            for kx in 0..k {
                let (xlo, xhi, ix0) = tap_range(kx, g, ow, w);
                let row = ((ci * k + ky) * k + kx) * plane;
                for (j, oy) in (ylo..yhi).enumerate() {
                    let iy = iy0 + j * g.stride;
                    let line = &chan[iy * w + ix0..(iy + 1) * w];
                    let out = &mut dst[row + oy * ow + xlo..row + oy * ow + xhi];
                    if g.stride == 1 {
                        out.copy_from_slice(&line[..out.len()]);
                    } else {
                        for (o, v) in out.iter_mut().zip(line.iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(g: &ConvGeometry, dcol: &Array2<T>, dx: &mut Array4<T>, n: usize, oh: usize, ow: usize) {
    let (_, c, h, w) = dx.dim();
    let mut dxs = dx.index_axis_mut(Axis(0), n);
    let dst = dxs.as_slice_mut().expect("standard layout");
    let src = dcol.as_slice().expect("standard layout");
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        let chan = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi, iy0) = tap_range(ky, g, oh, h);
            for kx in 0..k {
                let (xlo, xhi, ix0) = tap_range(kx, g, ow, w);
                let row = ((ci * k + ky) * k + kx) * plane;
                for (j, oy) in (ylo..yhi).enumerate() {
                    let iy = iy0 + j * g.stride;
                    let grads = &src[row + oy * ow + xlo..row + oy * ow + xhi];
                    let line = &mut chan[iy * w + ix0..(iy + 1) * w];
                    if g.stride == 1 {
                        for (v, gv) in line[..grads.len()].iter_mut().zip(grads) {
                            *v += *gv;
                        }
                    } else {
                        for (v, gv) in line.iter_mut().step_by(g.stride).zip(grads) {
                            *v += *gv;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let g = conv.geometry;
        let (n, c, h, w) = x.dim();
        let (oh, ow) = g.output_size(h, w);
        let wt = conv.weight.value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out = Array4::zeros((n, g.out_channels, oh, ow));
        for b in 0..n {
            for o in 0..g.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.value[[o]];
                        for ci in 0..c {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[[o, ci, ky, kx]] * x[[b, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[b, o, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matches_direct_convolution_for_mixed_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for g in [
            ConvGeometry::new(3, 4, 3).same(),
            ConvGeometry::new(2, 3, 3).stride(2).padding(1),
            ConvGeometry::new(2, 2, 3).dilation(2).same(),
            ConvGeometry::new(2, 2, 3).dilation(8).same(),
            ConvGeometry::new(2, 3, 3).stride(2).dilation(2).padding(3),
            ConvGeometry::new(3, 2, 1),
            ConvGeometry::new(2, 2, 3),
        ] {
            let mut conv = Conv2d::<f64>::new(g, &mut rng);
            conv.bias.value.mapv_inplace(|_| 0.3);
            let x = random((2, g.in_channels, 7, 6), &mut rng);
            let (y, _) = conv.forward(&x);
            let expect = naive_conv(&conv, &x);
            assert_eq!(y.dim(), expect.dim());
            let err = (&y - &expect).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-12, "{g:?}: {err}");
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for g in [
            ConvGeometry::new(2, 1, 3).same(),
            ConvGeometry::new(2, 1, 3).stride(2).padding(1),
            ConvGeometry::new(2, 1, 3).dilation(3).same(),
            ConvGeometry::new(2, 1, 3).stride(2).dilation(2).padding(3),
            ConvGeometry::new(2, 1, 3).dilation(9).same(),
        ] {
            let x = random((1, 2, 7, 6), &mut rng);
            let (oh, ow) = g.output_size(7, 6);
            let col = im2col(&g, &x, 0, oh, ow);
            let r = random((1, 1, col.nrows(), col.ncols()), &mut rng)
                .into_shape_with_order((col.nrows(), col.ncols()))
                .unwrap();
            let mut back = Array4::zeros(x.dim());
            col2im(&g, &r, &mut back, 0, oh, ow);
            let lhs = (&col * &r).sum();
            let rhs = (&x * &back).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ConvGeometry::new(2, 3, 3).stride(2).dilation(1).padding(1);
        let mut conv = Conv2d::<f64>::new(g, &mut rng);
        let x = random((1, 2, 5, 5), &mut rng);
        let (y, cache) = conv.forward(&x);
        let r = random(y.dim(), &mut rng);
        let dx = conv.backward(&cache, &r, true).unwrap();
        let loss = |c: &Conv2d<f64>, x: &Array4<f64>| (c.infer(x) * &r).sum();
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [0, 1, 2, 3], [0, 0, 4, 4]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
        let wi = [2usize, 1, 0, 2];
        let base = conv.weight.value[wi.as_slice()];
        let analytic = conv.weight.grad[wi.as_slice()];
        conv.weight.value[wi.as_slice()] = base + eps;
        let lp = loss(&conv, &x);
        conv.weight.value[wi.as_slice()] = base - eps;
        let lm = loss(&conv, &x);
        assert!(((lp - lm) / (2.0 * eps) - analytic).abs() < 1e-7);
    }
}
