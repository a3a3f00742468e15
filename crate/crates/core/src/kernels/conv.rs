//! 2-D convolution (cross-correlation, zero padding, no bias) via im2col + GEMM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvParams {
    /// Square kernel, dilation 1, one group.
    pub fn square(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvParams {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            dilation: 1,
            groups: 1,
            in_channels,
            out_channels,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::square(in_channels, out_channels, 1, 1, 0)
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// Fan-in of one output unit (used by He initialization).
    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups.max(1) * self.kernel_h * self.kernel_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(arg_err!("kernel extents must be positive: {:?}", self));
        }
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(arg_err!(
                "stride, dilation and groups must be positive: {:?}",
                self
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(arg_err!("channel counts must be positive: {:?}", self));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(arg_err!(
                "groups {} must divide in {} and out {} channels",
                self.groups,
                self.in_channels,
                self.out_channels
            ));
        }
        Ok(())
    }

    fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(shape_err!(
                "non-positive output extent: input {} padding {} kernel {} dilation {}",
                input,
                self.padding,
                kernel,
                self.dilation
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }

    /// Output spatial extents for an `h`×`w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            self.out_extent(h, self.kernel_h)?,
            self.out_extent(w, self.kernel_w)?,
        ))
    }

    /// Multiply-accumulates for one image.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (out_h * out_w) as u64 * self.weight_count() as u64
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

fn check_shapes<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    p: &ConvParams,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    p.validate()?;
    let (n, c, h, wd) = x.dims4()?;
    if c != p.in_channels {
        return Err(shape_err!(
            "conv2d input {:?} has {} channels, params expect {}",
            x.shape(),
            c,
            p.in_channels
        ));
    }
    if w.shape() != p.weight_shape() {
        return Err(shape_err!(
            "conv2d weight {:?} does not match expected {:?} (input {:?})",
            w.shape(),
            p.weight_shape(),
            x.shape()
        ));
    }
    let (oh, ow) = p.output_hw(h, wd)?;
    Ok((n, c, h, wd, oh, ow))
}

/// Unrolls one group of one image into `col` (rows = cin_g·kh·kw, cols = oh·ow).
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    h: usize,
    w: usize,
    p: &ConvParams,
    cin_g: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let plane_out = oh * ow;
    let (s, d, pad) = (p.stride as isize, p.dilation as isize, p.padding as isize);
    let mut row = 0;
    for c in 0..cin_g {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..p.kernel_h {
            for kx in 0..p.kernel_w {
                let dst = &mut col[row * plane_out..(row + 1) * plane_out];
                let dy = ky as isize * d - pad;
                let dx = kx as isize * d - pad;
                for oy in 0..oh {
                    let iy = oy as isize * s + dy;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        // valid ox range: 0 <= ox + dx < w
                        let lo = (-dx).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - dx).clamp(0, ow as isize) as usize;
                        out_row[..lo].fill(T::zero());
                        if hi > lo {
                            let start = (lo as isize + dx) as usize;
                            out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                        out_row[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = ox as isize * s + dx;
                            *o = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds `col` back into the image gradient `dx` (inverse of im2col).
#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    col: &[T],
    h: usize,
    w: usize,
    p: &ConvParams,
    cin_g: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let plane_out = oh * ow;
    let (s, d, pad) = (p.stride as isize, p.dilation as isize, p.padding as isize);
    let mut row = 0;
    for c in 0..cin_g {
        let dxc = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..p.kernel_h {
            for kx in 0..p.kernel_w {
                let src = &col[row * plane_out..(row + 1) * plane_out];
                let dy = ky as isize * d - pad;
                let dxo = kx as isize * d - pad;
                for oy in 0..oh {
                    let iy = oy as isize * s + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                    let in_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &g) in in_row.iter().enumerate() {
                        let ix = ox as isize * s + dxo;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + g;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation of `x` (N, C_in, H, W) with `w` (C_out, C_in/groups, kh, kw).
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, p: &ConvParams) -> Result<Tensor<T>> {
    let (n, c, h, wd, oh, ow) = check_shapes(x, w, p)?;
    let g = p.groups;
    let cin_g = c / g;
    let cout_g = p.out_channels / g;
    let k = cin_g * p.kernel_h * p.kernel_w;
    let plane_out = oh * ow;
    let mut out = Tensor::zeros(&[n, p.out_channels, oh, ow]);
    let xs = x.data();
    let ws = w.data();
    let img_in = c * h * wd;
    let img_out = p.out_channels * plane_out;
    if n == 0 || img_out == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(img_out)
        .enumerate()
        .for_each(|(b, y)| {
            let xb = &xs[b * img_in..(b + 1) * img_in];
            let mut col = if p.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); k * plane_out]
            };
            for gi in 0..g {
                let xg = &xb[gi * cin_g * h * wd..(gi + 1) * cin_g * h * wd];
                let wg = &ws[gi * cout_g * k..(gi + 1) * cout_g * k];
                let yg = &mut y[gi * cout_g * plane_out..(gi + 1) * cout_g * plane_out];
                let rhs: &[T] = if p.is_pointwise() {
                    xg
                } else {
                    im2col(xg, h, wd, p, cin_g, oh, ow, &mut col);
                    &col
                };
                T::gemm(
                    cout_g,
                    k,
                    plane_out,
                    wg,
                    (k as isize, 1),
                    rhs,
                    (plane_out as isize, 1),
                    yg,
                    (plane_out as isize, 1),
                    false,
                );
            }
        });
    Ok(out)
}

/// Gradients of `conv2d` with respect to the input (when `need_input_grad`)
/// and the weights. Weight gradients are reduced over the batch in index
/// order, so results do not depend on the thread count.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    p: &ConvParams,
    dy: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let (n, c, h, wd, oh, ow) = check_shapes(x, w, p)?;
    if dy.shape() != [n, p.out_channels, oh, ow] {
        return Err(shape_err!(
            "conv2d output gradient {:?} does not match output [{}, {}, {}, {}]",
            dy.shape(),
            n,
            p.out_channels,
            oh,
            ow
        ));
    }
    let g = p.groups;
    let cin_g = c / g;
    let cout_g = p.out_channels / g;
    let k = cin_g * p.kernel_h * p.kernel_w;
    let plane_out = oh * ow;
    let img_in = c * h * wd;
    let img_out = p.out_channels * plane_out;
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();

    let mut dw = Tensor::zeros(w.shape());
    {
        let dws = dw.data_mut();
        let mut col = if p.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * plane_out]
        };
        for b in 0..n {
            let xb = &xs[b * img_in..(b + 1) * img_in];
            let dyb = &dys[b * img_out..(b + 1) * img_out];
            for gi in 0..g {
                let xg = &xb[gi * cin_g * h * wd..(gi + 1) * cin_g * h * wd];
                let cols: &[T] = if p.is_pointwise() {
                    xg
                } else {
                    im2col(xg, h, wd, p, cin_g, oh, ow, &mut col);
                    &col
                };
                let dyg = &dyb[gi * cout_g * plane_out..(gi + 1) * cout_g * plane_out];
                let dwg = &mut dws[gi * cout_g * k..(gi + 1) * cout_g * k];
                // dW_g (cout_g × k) += dY_g (cout_g × P) · col^T (P × k)
                T::gemm(
                    cout_g,
                    plane_out,
                    k,
                    dyg,
                    (plane_out as isize, 1),
                    cols,
                    (1, plane_out as isize),
                    dwg,
                    (k as isize, 1),
                    true,
                );
            }
        }
    }

    let dx = if need_input_grad {
        let mut dx = Tensor::zeros(x.shape());
        if img_in > 0 {
            dx.data_mut()
                .par_chunks_mut(img_in)
                .enumerate()
                .for_each(|(b, dxb)| {
                    let dyb = &dys[b * img_out..(b + 1) * img_out];
                    let mut dcol = if p.is_pointwise() {
                        Vec::new()
                    } else {
                        vec![T::zero(); k * plane_out]
                    };
                    for gi in 0..g {
                        let wg = &ws[gi * cout_g * k..(gi + 1) * cout_g * k];
                        let dyg = &dyb[gi * cout_g * plane_out..(gi + 1) * cout_g * plane_out];
                        let dxg = &mut dxb[gi * cin_g * h * wd..(gi + 1) * cin_g * h * wd];
                        // dcol (k × P) = W_g^T (k × cout_g) · dY_g (cout_g × P)
                        if p.is_pointwise() {
                            T::gemm(
                                k,
                                cout_g,
                                plane_out,
                                wg,
                                (1, k as isize),
                                dyg,
                                (plane_out as isize, 1),
                                dxg,
                                (plane_out as isize, 1),
                                false,
                            );
                        } else {
                            T::gemm(
                                k,
                                cout_g,
                                plane_out,
                                wg,
                                (1, k as isize),
                                dyg,
                                (plane_out as isize, 1),
                                &mut dcol,
                                (plane_out as isize, 1),
                                false,
                            );
                            col2im(&dcol, h, wd, p, cin_g, oh, ow, dxg);
                        }
                    }
                });
        }
        Some(dx)
    } else {
        None
    };
    Ok((dx, dw))
}

/// Depthwise 3×3 (stride 1, padding 1) followed by a pointwise 1×1 mix.
///
/// `w_dw` is (C, 1, 3, 3), `w_pw` is (C_out, C, 1, 1).
pub fn depthwise_separable_conv3x3<T: Element>(
    x: &Tensor<T>,
    w_dw: &Tensor<T>,
    w_pw: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4()?;
    let (dw_p, pw_p) = depthwise_separable_params(c, w_pw)?;
    let mid = conv2d(x, w_dw, &dw_p)?;
    conv2d(&mid, w_pw, &pw_p)
}

/// The two stage parameters of a depthwise-separable 3×3 on `c` channels.
pub fn depthwise_separable_params<T: Element>(
    c: usize,
    w_pw: &Tensor<T>,
) -> Result<(ConvParams, ConvParams)> {
    let pw_shape = w_pw.shape();
    if pw_shape.len() != 4 || pw_shape[1] != c || pw_shape[2] != 1 || pw_shape[3] != 1 {
        return Err(shape_err!(
            "pointwise weight {:?} does not mix {} depthwise channels",
            pw_shape,
            c
        ));
    }
    let dw = ConvParams::square(c, c, 3, 1, 1).with_groups(c);
    let pw = ConvParams::pointwise(c, pw_shape[0]);
    Ok((dw, pw))
}
