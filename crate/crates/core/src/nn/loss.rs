use ndarray::{Array3, ArrayView2, ArrayView3};

use super::Real;
use crate::data::IGNORE;
use crate::error::{FrinetError, Result};

/// Channel index of the foreground score in two-channel logits.
pub const FG: usize = 0;
/// Channel index of the background score in two-channel logits.
pub const BG: usize = 1;

/// Mean per-pixel two-class cross-entropy over non-ignore pixels.
///
/// `logits` is `[2, H, W]` with foreground in channel [`FG`]; `mask` holds
/// 0 (background), 1 (foreground) or [`IGNORE`]. Returns the loss and its
/// gradient with respect to `logits`.
pub fn binary_cross_entropy<T: Real>(logits: ArrayView3<'_, T>, mask: ArrayView2<'_, u8>) -> Result<(T, Array3<T>)> {
    let (c, h, w) = logits.dim();
    if c != 2 || mask.dim() != (h, w) {
        return Err(FrinetError::ShapeMismatch {
            context: "binary cross-entropy",
            expected: vec![2, mask.nrows(), mask.ncols()],
            found: logits.shape().to_vec(),
        });
    }
    let valid = mask.iter().filter(|&&m| m != IGNORE).count();
    if valid == 0 {
        return Err(FrinetError::EmptyGroundTruth);
    }
    let scale = T::one() / T::from_usize(valid).unwrap();
    let mut grad = Array3::zeros((2, h, w));
    let mut total = T::zero();
    for y in 0..h {
        for x in 0..w {
            let label = mask[[y, x]];
            if label == IGNORE {
                continue;
            }
            let (f, b) = (logits[[FG, y, x]], logits[[BG, y, x]]);
            let m = f.max(b);
            let lse = m + ((f - m).exp() + (b - m).exp()).ln();
            let pf = (f - lse).exp();
            let pb = (b - lse).exp();
            let (target, tf, tb) = if label == 1 {
                (f, T::one(), T::zero())
            } else {
                (b, T::zero(), T::one())
            };
            total += lse - target;
            grad[[FG, y, x]] = (pf - tf) * scale;
            grad[[BG, y, x]] = (pb - tb) * scale;
        }
    }
    Ok((total * scale, grad))
}

/// Mean per-pixel softmax cross-entropy for `[K, H, W]` logits and integer targets.
pub fn softmax_cross_entropy<T: Real>(logits: ArrayView3<'_, T>, target: ArrayView2<'_, u8>) -> Result<(T, Array3<T>)> {
    let (k, h, w) = logits.dim();
    if target.dim() != (h, w) {
        return Err(FrinetError::ShapeMismatch {
            context: "softmax cross-entropy",
            expected: vec![k, target.nrows(), target.ncols()],
            found: logits.shape().to_vec(),
        });
    }
    let valid = target.iter().filter(|&&m| m != IGNORE).count();
    if valid == 0 {
        return Err(FrinetError::EmptyGroundTruth);
    }
    let scale = T::one() / T::from_usize(valid).unwrap();
    let mut grad = Array3::zeros((k, h, w));
    let mut total = T::zero();
    let mut probs = vec![T::zero(); k];
    for y in 0..h {
        for x in 0..w {
            let label = target[[y, x]];
            if label == IGNORE {
                continue;
            }
            let label = label as usize;
            assert!(label < k, "target label {label} out of range for {k} classes");
            let m = (0..k).map(|c| logits[[c, y, x]]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (c, p) in probs.iter_mut().enumerate() {
                *p = (logits[[c, y, x]] - m).exp();
                z += *p;
            }
            total += m + z.ln() - logits[[label, y, x]];
            for (c, p) in probs.iter().enumerate() {
                let t = if c == label { T::one() } else { T::zero() };
                grad[[c, y, x]] = (*p / z - t) * scale;
            }
        }
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    #[test]
    fn zero_logits_give_ln2() {
        let logits = Array3::<f64>::zeros((2, 3, 3));
        let mask = Array2::from_shape_fn((3, 3), |(y, x)| ((y + x) % 2) as u8);
        let (loss, _) = binary_cross_entropy(logits.view(), mask.view()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ignore_pixels_carry_no_gradient() {
        let logits = Array3::<f64>::from_elem((2, 2, 2), 0.3);
        let mut mask = Array2::<u8>::zeros((2, 2));
        mask[[0, 1]] = IGNORE;
        mask[[1, 1]] = 1;
        let (_, grad) = binary_cross_entropy(logits.view(), mask.view()).unwrap();
        assert_eq!(grad[[FG, 0, 1]], 0.0);
        assert_eq!(grad[[BG, 0, 1]], 0.0);
        let all_ignore = Array2::from_elem((2, 2), IGNORE);
        assert!(matches!(
            binary_cross_entropy(logits.view(), all_ignore.view()),
            Err(FrinetError::EmptyGroundTruth)
        ));
    }

    #[test]
    fn softmax_ce_reduces_to_binary_case() {
        let logits = Array3::from_shape_fn((2, 2, 3), |(c, y, x)| (c as f64 - 0.5) * (y * 3 + x) as f64 * 0.3);
        let mask = Array2::from_shape_fn((2, 3), |(y, x)| ((y * 3 + x) % 2) as u8);
        // binary: label 1 is channel FG=0, label 0 is channel BG=1
        let target = mask.mapv(|m| if m == 1 { 0 } else { 1 });
        let (a, _) = binary_cross_entropy(logits.view(), mask.view()).unwrap();
        let (b, _) = softmax_cross_entropy(logits.view(), target.view()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
