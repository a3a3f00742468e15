//! A dense block evaluated directly and as a residual stack over a
//! zero-padded state, used to check that the two formulations agree.

use crate::error::{shape_err, Result};
use crate::kernels::conv::{conv2d, ConvParams};
use crate::kernels::elementwise::{concat_channels, relu};
use crate::kernels::norm::{channel_stats, normalize, BN_EPSILON};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Parameters of one BN-ReLU-conv1×1 → BN-ReLU-conv3×3 dense unit.
#[derive(Clone, Debug)]
pub struct DenseUnitParams {
    pub gamma1: Tensor<f32>,
    pub beta1: Tensor<f32>,
    pub w1: Tensor<f32>,
    pub gamma2: Tensor<f32>,
    pub beta2: Tensor<f32>,
    pub w2: Tensor<f32>,
}

impl DenseUnitParams {
    pub fn random(c_in: usize, k: usize, rng: &mut SplitMix64) -> Self {
        let mut t = |shape: &[usize], lo: f64, hi: f64| {
            Tensor::from_fn(shape, |_| rng.uniform(lo, hi) as f32)
        };
        DenseUnitParams {
            gamma1: t(&[c_in], 0.5, 1.5),
            beta1: t(&[c_in], -0.5, 0.5),
            w1: t(&[4 * k, c_in, 1, 1], -0.5, 0.5),
            gamma2: t(&[4 * k], 0.5, 1.5),
            beta2: t(&[4 * k], -0.5, 0.5),
            w2: t(&[k, 4 * k, 3, 3], -0.5, 0.5),
        }
    }

    fn k(&self) -> usize {
        self.w2.shape()[0]
    }
}

fn bn_relu_batch(x: &Tensor<f32>, gamma: &Tensor<f32>, beta: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (m, v) = channel_stats(x)?;
    Ok(relu(&normalize(x, gamma, beta, &m, &v, BN_EPSILON)?))
}

fn unit(x: &Tensor<f32>, p: &DenseUnitParams) -> Result<Tensor<f32>> {
    let c = x.shape()[1];
    let k = p.k();
    let h = conv2d(
        &bn_relu_batch(x, &p.gamma1, &p.beta1)?,
        &p.w1,
        &ConvParams::pointwise(c, 4 * k),
    )?;
    conv2d(
        &bn_relu_batch(&h, &p.gamma2, &p.beta2)?,
        &p.w2,
        &ConvParams::square(4 * k, k, 3, 1, 1),
    )
}

/// Concatenation of the input and every unit's features.
pub fn dense_block_forward(x: &Tensor<f32>, units: &[DenseUnitParams]) -> Result<Tensor<f32>> {
    let mut feats = vec![x.clone()];
    for p in units {
        let refs: Vec<&Tensor<f32>> = feats.iter().collect();
        let cat = concat_channels(&refs)?;
        feats.push(unit(&cat, p)?);
    }
    let refs: Vec<&Tensor<f32>> = feats.iter().collect();
    concat_channels(&refs)
}

fn pad_vector(v: &Tensor<f32>, to: usize) -> Tensor<f32> {
    let mut out = Tensor::zeros(&[to]);
    out.data_mut()[..v.len()].copy_from_slice(v.data());
    out
}

fn pad_in_channels(w: &Tensor<f32>, to: usize) -> Result<Tensor<f32>> {
    let (o, c, kh, kw) = w.dims4()?;
    let mut out = Tensor::zeros(&[o, to, kh, kw]);
    let plane = kh * kw;
    for oc in 0..o {
        let src = &w.data()[oc * c * plane..(oc + 1) * c * plane];
        out.data_mut()[oc * to * plane..oc * to * plane + c * plane].copy_from_slice(src);
    }
    Ok(out)
}

/// Residual form: the state starts as the input padded with zero channels to
/// the block's output width, and unit `i` adds its features into channels
/// `c_in + i·k ..`, reading the state through zero-extended parameters.
pub fn emulate_dense_block_as_residual(
    x: &Tensor<f32>,
    units: &[DenseUnitParams],
) -> Result<Tensor<f32>> {
    let (n, c_in, h, w) = x.dims4()?;
    let k = units.first().map(|u| u.k()).unwrap_or(0);
    let total = c_in + units.len() * k;
    let mut state = Tensor::zeros(&[n, total, h, w]);
    let plane = h * w;
    for b in 0..n {
        let src = &x.data()[b * c_in * plane..(b + 1) * c_in * plane];
        state.data_mut()[b * total * plane..b * total * plane + c_in * plane].copy_from_slice(src);
    }
    for (i, p) in units.iter().enumerate() {
        if p.k() != k || p.gamma1.len() != c_in + i * k {
            return Err(shape_err!(
                "unit {} does not fit a block with input {} and growth {}",
                i,
                c_in,
                k
            ));
        }
        let padded = DenseUnitParams {
            gamma1: pad_vector(&p.gamma1, total),
            beta1: pad_vector(&p.beta1, total),
            w1: pad_in_channels(&p.w1, total)?,
            ..p.clone()
        };
        let f = unit(&state, &padded)?;
        let off = c_in + i * k;
        let sd = state.data_mut();
        for b in 0..n {
            for ch in 0..k {
                let dst = (b * total + off + ch) * plane;
                let s = (b * k + ch) * plane;
                for (d, v) in sd[dst..dst + plane].iter_mut().zip(&f.data()[s..s + plane]) {
                    *d += *v;
                }
            }
        }
    }
    Ok(state)
}
