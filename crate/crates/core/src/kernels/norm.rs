//! Per-channel batch normalization over (N, H, W).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the new batch in the running-average update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running statistics.
    Eval,
    /// Normalize with batch statistics and pool their moments for a
    /// later statistics recomputation; running averages are untouched.
    Accumulate,
}

/// Running statistics of one batch-norm layer plus pooled-moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
    /// Mean and biased variance of everything accumulated so far.
    pub acc_mean: Vec<f64>,
    pub acc_var: Vec<f64>,
    pub count: u64,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        BnRunning {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
            acc_mean: vec![0.0; channels],
            acc_var: vec![0.0; channels],
            count: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn update_moving(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        if !self.initialized {
            // first batch seeds the averages
            self.mean.copy_from_slice(mean);
            self.var.copy_from_slice(var);
            self.initialized = true;
            return;
        }
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * var[c];
        }
    }

    pub fn reset_accumulators(&mut self) {
        self.acc_mean.fill(0.0);
        self.acc_var.fill(0.0);
        self.count = 0;
    }

    /// Merges the moments of `n` further activations per channel. The first
    /// batch is copied verbatim so a single batch reproduces its statistics
    /// exactly.
    pub fn accumulate(&mut self, mean: &[f64], var: &[f64], n: u64) {
        if n == 0 {
            return;
        }
        if self.count == 0 {
            self.acc_mean.copy_from_slice(mean);
            self.acc_var.copy_from_slice(var);
            self.count = n;
            return;
        }
        let (na, nb) = (self.count as f64, n as f64);
        let total = na + nb;
        for c in 0..self.acc_mean.len() {
            let delta = mean[c] - self.acc_mean[c];
            self.acc_var[c] =
                (self.acc_var[c] * na + var[c] * nb + delta * delta * na * nb / total) / total;
            self.acc_mean[c] += delta * nb / total;
        }
        self.count += n;
    }

    /// Replaces running statistics with the exact accumulated moments.
    pub fn finalize_accumulated(&mut self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument(
                "no activations were accumulated".into(),
            ));
        }
        self.mean.copy_from_slice(&self.acc_mean);
        self.var.copy_from_slice(&self.acc_var);
        self.initialized = true;
        Ok(())
    }
}

fn check_params<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let (_, c, _, _) = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err!(
            "batch norm parameters ({}, {}) do not match {} channels of {:?}",
            gamma.len(),
            beta.len(),
            c,
            x.shape()
        ));
    }
    Ok(c)
}

/// Biased per-channel mean and variance over (N, H, W), accumulated in f64.
pub fn channel_stats<T: Element>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let xs = x.data();
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for v in &xs[base..base + plane] {
                s += v.as_f64();
            }
        }
        let m = s / count;
        let mut q = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for v in &xs[base..base + plane] {
                let d = v.as_f64() - m;
                q += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    Ok((mean, var))
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` with the given statistics.
pub fn normalize<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor<T>> {
    let c = check_params(x, gamma, beta)?;
    let (n, _, h, w) = x.dims4()?;
    if mean.len() != c || var.len() != c {
        return Err(shape_err!(
            "statistics length does not match {} channels",
            c
        ));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    let xs = x.data();
    let ys = out.data_mut();
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let scale = gamma.data()[ch].as_f64() * inv;
        let shift = beta.data()[ch].as_f64() - mean[ch] * scale;
        let (scale, shift) = (T::from_f64(scale), T::from_f64(shift));
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for (y, &v) in ys[base..base + plane]
                .iter_mut()
                .zip(&xs[base..base + plane])
            {
                *y = v * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Batch normalization in one of the three modes.
///
/// Returns the output plus the statistics actually used for normalization so
/// that a recomputation can replay them.
pub fn batch_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut BnRunning,
    mode: BnMode,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor<T>, Vec<f64>, Vec<f64>)> {
    let c = check_params(x, gamma, beta)?;
    if running.channels() != c {
        return Err(shape_err!(
            "running statistics have {} channels, input has {}",
            running.channels(),
            c
        ));
    }
    match mode {
        BnMode::Eval => {
            if !running.initialized {
                return Err(Error::UninitializedStats(0));
            }
            let (m, v) = (running.mean.clone(), running.var.clone());
            Ok((normalize(x, gamma, beta, &m, &v, eps)?, m, v))
        }
        BnMode::Train => {
            let (m, v) = channel_stats(x)?;
            running.update_moving(&m, &v, momentum);
            Ok((normalize(x, gamma, beta, &m, &v, eps)?, m, v))
        }
        BnMode::Accumulate => {
            let (m, v) = channel_stats(x)?;
            let (n, _, h, w) = x.dims4()?;
            running.accumulate(&m, &v, (n * h * w) as u64);
            Ok((normalize(x, gamma, beta, &m, &v, eps)?, m, v))
        }
    }
}

/// Gradients (dx, dgamma, dbeta). With `batch_stats` the statistics are
/// treated as functions of `x`; otherwise they are constants.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    dy: &Tensor<T>,
    batch_stats: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if dy.shape() != x.shape() || gamma.len() != c {
        return Err(shape_err!(
            "batch norm backward shapes {:?} vs {:?}",
            dy.shape(),
            x.shape()
        ));
    }
    let plane = h * w;
    let m_count = (n * plane) as f64;
    let xs = x.data();
    let dys = dy.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let dxs = dx.data_mut();
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let g = dys[i].as_f64();
                sum_dy += g;
                sum_dy_xhat += g * (xs[i].as_f64() - mean[ch]) * inv;
            }
        }
        dgamma.data_mut()[ch] = T::from_f64(sum_dy_xhat);
        dbeta.data_mut()[ch] = T::from_f64(sum_dy);
        let gi = gamma.data()[ch].as_f64() * inv;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let g = dys[i].as_f64();
                let v = if batch_stats {
                    let xhat = (xs[i].as_f64() - mean[ch]) * inv;
                    gi * (g - sum_dy / m_count - xhat * sum_dy_xhat / m_count)
                } else {
                    gi * g
                };
                dxs[i] = T::from_f64(v);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_params(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[c], 1.0), Tensor::zeros(&[c]))
    }

    #[test]
    fn standardized_batch_is_nearly_unchanged() {
        // per channel values {-1, 1, -1, 1}: mean 0, variance 1
        let x = Tensor::<f64>::from_vec(&[2, 1, 1, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let (g, b) = unit_params(1);
        let mut r = BnRunning::new(1);
        let (y, _, _) =
            batch_norm(&x, &g, &b, &mut r, BnMode::Train, BN_MOMENTUM, BN_EPSILON).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f32>::full(&[2, 2, 3, 3], 4.5);
        let g = Tensor::<f32>::full(&[2], 2.0);
        let b = Tensor::<f32>::from_vec(&[2], vec![0.25, -1.0]).unwrap();
        let mut r = BnRunning::new(2);
        let (y, _, _) =
            batch_norm(&x, &g, &b, &mut r, BnMode::Train, BN_MOMENTUM, BN_EPSILON).unwrap();
        assert!(y
            .channel_slice(0, 1)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.25));
        assert!(y
            .channel_slice(1, 2)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == -1.0));
    }

    #[test]
    fn two_element_channel_hand_formula() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let (g, b) = unit_params(1);
        let mut r = BnRunning::new(1);
        let (y, _, _) =
            batch_norm(&x, &g, &b, &mut r, BnMode::Train, BN_MOMENTUM, BN_EPSILON).unwrap();
        // mean 1, biased variance 1 -> ±1/sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn eval_requires_initialized_statistics() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let (g, b) = (Tensor::full(&[1], 1.0f32), Tensor::zeros(&[1]));
        let mut r = BnRunning::new(1);
        assert!(matches!(
            batch_norm(&x, &g, &b, &mut r, BnMode::Eval, BN_MOMENTUM, BN_EPSILON),
            Err(Error::UninitializedStats(_))
        ));
    }

    #[test]
    fn running_average_uses_momentum() {
        let mut r = BnRunning::new(1);
        r.update_moving(&[1.0], &[2.0], 0.1);
        r.update_moving(&[3.0], &[4.0], 0.1);
        assert!((r.mean[0] - 1.2).abs() < 1e-12);
        assert!((r.var[0] - 2.2).abs() < 1e-12);
    }

    #[test]
    fn accumulate_matches_batch_statistics() {
        let x = Tensor::<f64>::from_fn(&[3, 2, 2, 2], |i| (i as f64 * 0.37).sin());
        let (g, b) = unit_params(2);
        let mut r = BnRunning::new(2);
        let (_, m, v) = batch_norm(
            &x,
            &g,
            &b,
            &mut r,
            BnMode::Accumulate,
            BN_MOMENTUM,
            BN_EPSILON,
        )
        .unwrap();
        assert!(!r.initialized);
        r.finalize_accumulated().unwrap();
        assert_eq!(r.mean, m);
        assert_eq!(r.var, v);
    }

    #[test]
    fn pooled_moments_equal_whole_set() {
        let x = Tensor::<f64>::from_fn(&[4, 2, 3, 3], |i| {
            (i as f64 * 0.61).cos() * 3.0 + i as f64 * 0.01
        });
        let (whole_m, whole_v) = channel_stats(&x).unwrap();
        let half = x.len() / 2;
        let a = Tensor::from_vec(&[2, 2, 3, 3], x.data()[..half].to_vec()).unwrap();
        let b = Tensor::from_vec(&[2, 2, 3, 3], x.data()[half..].to_vec()).unwrap();
        let mut r = BnRunning::new(2);
        for t in [&a, &b] {
            let (m, v) = channel_stats(t).unwrap();
            r.accumulate(&m, &v, 18);
        }
        r.finalize_accumulated().unwrap();
        for c in 0..2 {
            assert!((r.mean[c] - whole_m[c]).abs() < 1e-12);
            assert!((r.var[c] - whole_v[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_length_is_checked() {
        let x = Tensor::<f32>::zeros(&[1, 3, 2, 2]);
        let g = Tensor::<f32>::zeros(&[2]);
        let mut r = BnRunning::new(3);
        assert!(batch_norm(&x, &g, &g, &mut r, BnMode::Train, BN_MOMENTUM, BN_EPSILON).is_err());
    }
}
