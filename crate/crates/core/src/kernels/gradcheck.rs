//! Finite-difference verification of the analytic kernel gradients.
//!
//! Each trial draws small random double-precision operands, contracts the
//! kernel output with a random tensor `r` to get a scalar `L = <f(x), r>`, and
//! compares the analytic vector-Jacobian products against central
//! differences of `L`.

use std::fmt;
use std::str::FromStr;

use crate::error::{arg_err, Result};
use crate::kernels::conv::{conv2d, conv2d_backward, ConvParams};
use crate::kernels::elementwise::{add, concat_channels, relu, relu_backward, split_channels};
use crate::kernels::loss::softmax_cross_entropy;
use crate::kernels::norm::{
    batch_norm, batch_norm_backward, BnMode, BnRunning, BN_EPSILON, BN_MOMENTUM,
};
use crate::kernels::pool::{
    grid_avg_pool, grid_avg_pool_backward, pool, pool_backward, PoolKind, PoolParams,
};
use crate::kernels::resize::{bilinear_resize, bilinear_resize_backward};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
pub const GRADCHECK_TRIALS: usize = 25;
const STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Conv2d,
    Conv2dStrided,
    Conv2dDilatedGrouped,
    DepthwiseSeparable,
    BatchNorm,
    Relu,
    Add,
    Concat,
    MaxPool,
    AvgPool,
    GridAvgPool,
    BilinearResize,
    SoftmaxCrossEntropy,
}

impl Kernel {
    pub const ALL: [Kernel; 13] = [
        Kernel::Conv2d,
        Kernel::Conv2dStrided,
        Kernel::Conv2dDilatedGrouped,
        Kernel::DepthwiseSeparable,
        Kernel::BatchNorm,
        Kernel::Relu,
        Kernel::Add,
        Kernel::Concat,
        Kernel::MaxPool,
        Kernel::AvgPool,
        Kernel::GridAvgPool,
        Kernel::BilinearResize,
        Kernel::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Conv2d => "conv2d",
            Kernel::Conv2dStrided => "conv2d_strided",
            Kernel::Conv2dDilatedGrouped => "conv2d_dilated_grouped",
            Kernel::DepthwiseSeparable => "depthwise_separable",
            Kernel::BatchNorm => "batch_norm",
            Kernel::Relu => "relu",
            Kernel::Add => "add",
            Kernel::Concat => "concat",
            Kernel::MaxPool => "max_pool",
            Kernel::AvgPool => "avg_pool",
            Kernel::GridAvgPool => "grid_avg_pool",
            Kernel::BilinearResize => "bilinear_resize",
            Kernel::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| arg_err!("unknown kernel `{}`", s))
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckResult {
    pub kernel: Kernel,
    pub trials: usize,
    pub max_rel_error: f64,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

type Forward = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;
type Backward = Box<dyn Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    forward: Forward,
    backward: Backward,
}

fn randn(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn dim(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

fn conv_case(p: ConvParams, rng: &mut SplitMix64, n: usize, h: usize, w: usize) -> Case {
    let x = randn(rng, &[n, p.in_channels, h, w]);
    let wt = randn(rng, &p.weight_shape());
    Case {
        inputs: vec![x, wt],
        forward: Box::new(move |t| conv2d(&t[0], &t[1], &p)),
        backward: Box::new(move |t, dy| {
            let (dx, dw) = conv2d_backward(&t[0], &t[1], &p, dy, true)?;
            Ok(vec![dx.expect("input gradient requested"), dw])
        }),
    }
}

fn pool_case(p: PoolParams, rng: &mut SplitMix64) -> Case {
    let (n, c) = (dim(rng, 1, 2), dim(rng, 1, 4));
    let (h, w) = (dim(rng, 2, 4), dim(rng, 2, 4));
    Case {
        inputs: vec![randn(rng, &[n, c, h, w])],
        forward: Box::new(move |t| pool(&t[0], &p)),
        backward: Box::new(move |t, dy| Ok(vec![pool_backward(&t[0], &p, dy)?])),
    }
}

fn make_case(kernel: Kernel, rng: &mut SplitMix64) -> Case {
    let n = dim(rng, 1, 2);
    let c = dim(rng, 1, 4);
    let h = dim(rng, 1, 4);
    let w = dim(rng, 1, 4);
    match kernel {
        Kernel::Conv2d => {
            let co = dim(rng, 1, 4);
            let k = [1, 3][rng.below(2) as usize];
            conv_case(ConvParams::square(c, co, k, 1, k / 2), rng, n, h, w)
        }
        Kernel::Conv2dStrided => {
            let co = dim(rng, 1, 4);
            let (h, w) = (dim(rng, 2, 4), dim(rng, 2, 4));
            conv_case(ConvParams::square(c, co, 3, 2, 1), rng, n, h, w)
        }
        Kernel::Conv2dDilatedGrouped => {
            let g = [1, 2][rng.below(2) as usize];
            let p = ConvParams::square(2 * dim(rng, 1, 2), 2 * dim(rng, 1, 2), 3, 1, 2)
                .with_dilation(2)
                .with_groups(g);
            conv_case(p, rng, n, h, w)
        }
        Kernel::DepthwiseSeparable => {
            let co = dim(rng, 1, 4);
            let dw_p = ConvParams::square(c, c, 3, 1, 1).with_groups(c);
            let pw_p = ConvParams::pointwise(c, co);
            Case {
                inputs: vec![
                    randn(rng, &[n, c, h, w]),
                    randn(rng, &dw_p.weight_shape()),
                    randn(rng, &pw_p.weight_shape()),
                ],
                forward: Box::new(move |t| {
                    crate::kernels::conv::depthwise_separable_conv3x3(&t[0], &t[1], &t[2])
                }),
                backward: Box::new(move |t, dy| {
                    let mid = conv2d(&t[0], &t[1], &dw_p)?;
                    let (dmid, dpw) = conv2d_backward(&mid, &t[2], &pw_p, dy, true)?;
                    let (dx, ddw) =
                        conv2d_backward(&t[0], &t[1], &dw_p, &dmid.expect("requested"), true)?;
                    Ok(vec![dx.expect("requested"), ddw, dpw])
                }),
            }
        }
        Kernel::BatchNorm => {
            // at least two values per channel so the batch variance is informative
            let w = dim(rng, 2, 4);
            let x = randn(rng, &[n, c, h, w]);
            let gamma = randn(rng, &[c]);
            let beta = randn(rng, &[c]);
            let run = move |t: &[Tensor<f64>]| {
                let mut r = BnRunning::new(t[1].len());
                batch_norm(
                    &t[0],
                    &t[1],
                    &t[2],
                    &mut r,
                    BnMode::Train,
                    BN_MOMENTUM,
                    BN_EPSILON,
                )
            };
            Case {
                inputs: vec![x, gamma, beta],
                forward: Box::new(move |t| Ok(run(t)?.0)),
                backward: Box::new(move |t, dy| {
                    let (_, mean, var) = run(t)?;
                    let (dx, dg, db) =
                        batch_norm_backward(&t[0], &t[1], &mean, &var, BN_EPSILON, dy, true)?;
                    Ok(vec![dx, dg, db])
                }),
            }
        }
        Kernel::Relu => Case {
            inputs: vec![randn(rng, &[n, c, h, w])],
            forward: Box::new(|t| Ok(relu(&t[0]))),
            backward: Box::new(|t, dy| Ok(vec![relu_backward(&relu(&t[0]), dy)?])),
        },
        Kernel::Add => Case {
            inputs: vec![randn(rng, &[n, c, h, w]), randn(rng, &[n, c, h, w])],
            forward: Box::new(|t| add(&t[0], &t[1])),
            backward: Box::new(|_, dy| Ok(vec![dy.clone(), dy.clone()])),
        },
        Kernel::Concat => {
            let c2 = dim(rng, 1, 4);
            Case {
                inputs: vec![randn(rng, &[n, c, h, w]), randn(rng, &[n, c2, h, w])],
                forward: Box::new(|t| concat_channels(&[&t[0], &t[1]])),
                backward: Box::new(move |_, dy| split_channels(dy, &[c, c2])),
            }
        }
        Kernel::MaxPool => pool_case(PoolParams::new(PoolKind::Max, 3, 2, 1), rng),
        Kernel::AvgPool => {
            let p = if rng.bernoulli(0.5) {
                PoolParams::new(PoolKind::Avg, 2, 2, 0)
            } else {
                PoolParams::new(PoolKind::Avg, 3, 2, 1)
            };
            pool_case(p, rng)
        }
        Kernel::GridAvgPool => {
            let rows = dim(rng, 1, h);
            let shape = [n, c, h, w];
            Case {
                inputs: vec![randn(rng, &shape)],
                forward: Box::new(move |t| grid_avg_pool(&t[0], rows)),
                backward: Box::new(move |t, dy| {
                    let (_, _, gr, gc) = dy.dims4()?;
                    Ok(vec![grid_avg_pool_backward(t[0].shape(), gr, gc, dy)?])
                }),
            }
        }
        Kernel::BilinearResize => {
            let (oh, ow) = (dim(rng, 1, 8), dim(rng, 1, 8));
            Case {
                inputs: vec![randn(rng, &[n, c, h, w])],
                forward: Box::new(move |t| bilinear_resize(&t[0], oh, ow)),
                backward: Box::new(|t, dy| Ok(vec![bilinear_resize_backward(t[0].shape(), dy)?])),
            }
        }
        Kernel::SoftmaxCrossEntropy => {
            let c = dim(rng, 2, 4);
            let logits = randn(rng, &[n, c, h, w]);
            // random distributions with roughly a quarter of the pixels masked
            let mut target = Tensor::<f64>::zeros(&[n, c, h, w]);
            let plane = h * w;
            for b in 0..n {
                for p in 0..plane {
                    if rng.bernoulli(0.25) && !(b == 0 && p == 0) {
                        continue;
                    }
                    let raw: Vec<f64> = (0..c).map(|_| rng.next_f64() + 0.05).collect();
                    let s: f64 = raw.iter().sum();
                    for (ch, v) in raw.iter().enumerate() {
                        target.data_mut()[(b * c + ch) * plane + p] = v / s;
                    }
                }
            }
            let target_b = target.clone();
            Case {
                inputs: vec![logits],
                forward: Box::new(move |t| {
                    Ok(Tensor::scalar(softmax_cross_entropy(&t[0], &target)?.loss))
                }),
                backward: Box::new(move |t, dy| {
                    let g = softmax_cross_entropy(&t[0], &target_b)?.grad;
                    let s = dy.data()[0];
                    Ok(vec![g.map(|v| v * s)])
                }),
            }
        }
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, 1)`; the unit floor
/// keeps all-zero gradients (e.g. a fully inactive ReLU) from dividing
/// round-off by zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let na = norm(&mut analytic.iter().copied());
    let nb = norm(&mut numeric.iter().copied());
    diff / na.max(nb).max(1.0)
}

fn run_case(case: Case, rng: &mut SplitMix64) -> Result<f64> {
    let y = (case.forward)(&case.inputs)?;
    let r = randn(rng, y.shape());
    let analytic = (case.backward)(&case.inputs, &r)?;
    let mut worst = 0.0f64;
    let mut inputs = case.inputs.clone();
    for (i, g) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + STEP;
            let plus = dot(&(case.forward)(&inputs)?, &r);
            inputs[i].data_mut()[j] = orig - STEP;
            let minus = dot(&(case.forward)(&inputs)?, &r);
            inputs[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(g.data(), &numeric));
    }
    Ok(worst)
}

/// Runs `trials` random cases for one kernel with a deterministic seed.
pub fn check_kernel(kernel: Kernel, trials: usize, seed: u64) -> Result<GradcheckResult> {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = SplitMix64::derive(seed, &[kernel as u64, t as u64]);
        let case = make_case(kernel, &mut rng);
        worst = worst.max(run_case(case, &mut rng)?);
    }
    Ok(GradcheckResult {
        kernel,
        trials,
        max_rel_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kernel_passes() {
        for k in Kernel::ALL {
            let r = check_kernel(k, GRADCHECK_TRIALS, 7).unwrap();
            eprintln!("{} {:e}", k, r.max_rel_error);
            assert!(r.passed(), "{} relative error {:e}", k, r.max_rel_error);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let a = [1.0, 2.0, 3.0];
        let b = [1.0, 2.0, 3.001];
        assert!(relative_error(&a, &b) > GRADCHECK_TOLERANCE);
        assert_eq!(relative_error(&a, &a), 0.0);
    }

    #[test]
    fn kernel_names_round_trip() {
        for k in Kernel::ALL {
            assert_eq!(k.name().parse::<Kernel>().unwrap(), k);
        }
        assert!("winograd".parse::<Kernel>().is_err());
    }
}
