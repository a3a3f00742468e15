//! Softmax cross-entropy against per-pixel target distributions.

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Result of a cross-entropy evaluation.
#[derive(Clone, Debug)]
pub struct CrossEntropy<T: Element> {
    /// Mean over unmasked pixels.
    pub loss: f64,
    /// Gradient of `loss` with respect to the logits.
    pub grad: Tensor<T>,
    pub valid_pixels: usize,
    /// Set when every pixel was masked; `loss` is then 0.
    pub all_masked: bool,
}

/// Cross-entropy of `softmax(logits)` against `target` (both N, C, H, W).
///
/// A pixel whose target column is all zeros is masked. Every other column
/// must sum to one.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<CrossEntropy<T>> {
    if logits.shape() != target.shape() {
        return Err(shape_err!(
            "logits {:?} and targets {:?} differ",
            logits.shape(),
            target.shape()
        ));
    }
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let tol = 1e-6f64.max(4.0 * c as f64 * T::epsilon().as_f64());
    let ls = logits.data();
    let ts = target.data();

    let mut valid = 0usize;
    let mut total = 0.0f64;
    let mut probs = vec![0.0f64; c];
    // per pixel: softmax in f64, gradient stored unscaled then divided by count
    let mut grad = vec![0.0f64; ls.len()];
    for b in 0..n {
        for p in 0..plane {
            let idx = |ch: usize| (b * c + ch) * plane + p;
            let tsum: f64 = (0..c).map(|ch| ts[idx(ch)].as_f64()).sum();
            if tsum == 0.0 {
                continue;
            }
            if (tsum - 1.0).abs() > tol {
                return Err(arg_err!(
                    "target distribution sums to {} at batch {} pixel {}",
                    tsum,
                    b,
                    p
                ));
            }
            valid += 1;
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(ls[idx(ch)].as_f64());
            }
            let mut z = 0.0;
            for (ch, pr) in probs.iter_mut().enumerate() {
                *pr = (ls[idx(ch)].as_f64() - m).exp();
                z += *pr;
            }
            let log_z = z.ln();
            for (ch, pr) in probs.iter().enumerate() {
                let t = ts[idx(ch)].as_f64();
                if t != 0.0 {
                    total -= t * (ls[idx(ch)].as_f64() - m - log_z);
                }
                grad[idx(ch)] = pr / z * tsum - t;
            }
        }
    }
    if valid == 0 {
        return Ok(CrossEntropy {
            loss: 0.0,
            grad: Tensor::zeros(logits.shape()),
            valid_pixels: 0,
            all_masked: true,
        });
    }
    let inv = 1.0 / valid as f64;
    let grad = Tensor::from_vec(
        logits.shape(),
        grad.into_iter().map(|g| T::from_f64(g * inv)).collect(),
    )?;
    Ok(CrossEntropy {
        loss: total * inv,
        grad,
        valid_pixels: valid,
        all_masked: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(c: usize, class: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, c, 1, 1], |i| if i == class { 1.0 } else { 0.0 })
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        for c in [2usize, 5, 19] {
            let logits = Tensor::<f64>::full(&[1, c, 1, 1], 0.7);
            let ce = softmax_cross_entropy(&logits, &one_hot(c, 0)).unwrap();
            assert!((ce.loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn self_target_gives_entropy() {
        let logits = Tensor::<f64>::from_vec(&[1, 3, 1, 1], vec![0.2, -1.0, 2.0]).unwrap();
        let e: Vec<f64> = logits.data().iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / z).collect();
        let target = Tensor::from_vec(&[1, 3, 1, 1], p.clone()).unwrap();
        let entropy: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        let ce = softmax_cross_entropy(&logits, &target).unwrap();
        assert!((ce.loss - entropy).abs() < 1e-12);
        // the gradient vanishes at the target
        assert!(ce.grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn fully_masked_is_zero_with_flag() {
        let logits = Tensor::<f32>::full(&[2, 4, 3, 3], 1.0);
        let ce = softmax_cross_entropy(&logits, &Tensor::zeros(&[2, 4, 3, 3])).unwrap();
        assert_eq!(ce.loss, 0.0);
        assert!(ce.all_masked);
    }

    #[test]
    fn masked_pixels_do_not_count() {
        let logits = Tensor::<f64>::from_fn(&[1, 2, 1, 2], |i| i as f64);
        let mut t = Tensor::<f64>::zeros(&[1, 2, 1, 2]);
        t.data_mut()[0] = 1.0; // pixel 0 -> class 0, pixel 1 masked
        let ce = softmax_cross_entropy(&logits, &t).unwrap();
        assert_eq!(ce.valid_pixels, 1);
        let want = -(0.0 - (0f64.exp() + 2f64.exp()).ln());
        assert!((ce.loss - want).abs() < 1e-12);
        assert_eq!(ce.grad.data()[1], 0.0);
        assert_eq!(ce.grad.data()[3], 0.0);
    }

    #[test]
    fn unnormalized_target_is_rejected() {
        let logits = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        let t = Tensor::<f64>::full(&[1, 2, 1, 1], 0.7);
        assert!(softmax_cross_entropy(&logits, &t).is_err());
    }

    #[test]
    fn stable_for_huge_logits() {
        let logits = Tensor::<f32>::from_vec(&[1, 2, 1, 1], vec![1e4, -1e4]).unwrap();
        let t = Tensor::<f32>::from_vec(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let ce = softmax_cross_entropy(&logits, &t).unwrap();
        assert!(ce.loss.is_finite() && ce.loss.abs() < 1e-6);
    }
}
