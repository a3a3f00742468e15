//! AMSGrad and the cosine learning-rate schedule.

use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

/// `base · ½(1 + cos(π · epoch / total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base: f64) -> Result<f64> {
    if total_epochs == 0 || epoch > total_epochs {
        return Err(arg_err!("epoch {} outside 0..={}", epoch, total_epochs));
    }
    let t = epoch as f64 / total_epochs as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Adam with a running maximum of the second moment. Moments are kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct AmsGrad {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub v_hat: Vec<Vec<f64>>,
    /// Learning-rate multiplier per parameter tensor.
    pub lr_mult: Vec<f64>,
}

impl AmsGrad {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        AmsGrad {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
            v_hat: zeros(),
            lr_mult: vec![1.0; sizes.len()],
        }
    }

    /// One update. `None` gradients count as zero. Any non-finite gradient
    /// rejects the whole step before anything is modified.
    pub fn update(
        &mut self,
        names: &[String],
        params: &mut [Tensor<f32>],
        grads: &[Option<Tensor<f32>>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len()
            || grads.len() != params.len()
            || names.len() != params.len()
        {
            return Err(arg_err!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != params[i].len() {
                    return Err(arg_err!(
                        "gradient of `{}` has {} values, expected {}",
                        names[i],
                        g.len(),
                        params[i].len()
                    ));
                }
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(names[i].clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let rate = lr * self.lr_mult[i];
            let (m, v, vh) = (&mut self.m[i], &mut self.v[i], &mut self.v_hat[i]);
            let g = grads[i].as_ref().map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let mut gj = g.map(|g| g[j] as f64).unwrap_or(0.0);
                if self.weight_decay != 0.0 {
                    gj += self.weight_decay * *w as f64;
                }
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                vh[j] = vh[j].max(v[j]);
                let step = rate * (m[j] / c1) / ((vh[j] / c2).sqrt() + self.eps);
                *w = (*w as f64 - step) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{}", i)).collect()
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.4).unwrap(), 0.4);
        assert!(cosine_lr(10, 10, 0.4).unwrap().abs() < 1e-15);
        assert!((cosine_lr(5, 10, 0.4).unwrap() - 0.2).abs() < 1e-15);
        assert!(cosine_lr(11, 10, 0.4).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::full(&[3], 0.5f32)];
        let mut opt = AmsGrad::new(&[3], 0.9, 0.999, 1e-8, 0.0);
        for _ in 0..5 {
            opt.update(&names(1), &mut p, &[None], 0.1).unwrap();
        }
        assert_eq!(p[0].data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut p = vec![Tensor::full(&[2], 1.0f32)];
        let mut opt = AmsGrad::new(&[2], 0.9, 0.999, 1e-8, 0.0);
        let g = Tensor::from_vec(&[2], vec![1.0, f32::NAN]).unwrap();
        let err = opt.update(&names(1), &mut p, &[Some(g)], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p0"));
        assert_eq!(opt.step, 0);
        assert_eq!(p[0].data(), &[1.0, 1.0]);
    }
}
