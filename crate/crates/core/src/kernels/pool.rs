//! Windowed max/average pooling and grid (pyramid) average pooling.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolParams {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolParams {
    pub fn new(kind: PoolKind, window: usize, stride: usize, padding: usize) -> Self {
        PoolParams {
            kind,
            window,
            stride,
            padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window == 0 || self.stride == 0 {
            return Err(arg_err!("pool window and stride must be positive"));
        }
        if self.padding >= self.window {
            return Err(arg_err!(
                "pool padding {} must be smaller than window {}",
                self.padding,
                self.window
            ));
        }
        let ext = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.window {
                return Err(shape_err!(
                    "pool output extent < 1: input {} padding {} window {}",
                    n,
                    self.padding,
                    self.window
                ));
            }
            Ok((padded - self.window) / self.stride + 1)
        };
        Ok((ext(h)?, ext(w)?))
    }

    fn range(&self, o: usize, n: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.padding as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.window as isize).min(n as isize)).max(0) as usize;
        (lo, hi.max(lo))
    }
}

pub fn pool<T: Element>(x: &Tensor<T>, p: &PoolParams) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = p.output_hw(h, w)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xs = x.data();
    let ys = out.data_mut();
    for plane in 0..n * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        let dst = &mut ys[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = p.range(oy, h);
            for ox in 0..ow {
                let (x0, x1) = p.range(ox, w);
                let v = match p.kind {
                    PoolKind::Max => {
                        let mut m = T::neg_infinity();
                        for iy in y0..y1 {
                            for &v in &src[iy * w + x0..iy * w + x1] {
                                if v > m {
                                    m = v;
                                }
                            }
                        }
                        m
                    }
                    PoolKind::Avg => {
                        let mut s = T::zero();
                        for iy in y0..y1 {
                            for &v in &src[iy * w + x0..iy * w + x1] {
                                s = s + v;
                            }
                        }
                        let cnt = (y1 - y0) * (x1 - x0);
                        s / T::from_f64(cnt as f64)
                    }
                };
                dst[oy * ow + ox] = v;
            }
        }
    }
    Ok(out)
}

/// Input gradient of `pool`. Max pooling routes to the first maximal cell in
/// scan order; average pooling spreads over the valid (non-padding) cells.
pub fn pool_backward<T: Element>(
    x: &Tensor<T>,
    p: &PoolParams,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    if p.kind == PoolKind::Avg {
        return avg_pool_backward(x.shape(), p, dy);
    }
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = p.output_hw(h, w)?;
    if dy.shape() != [n, c, oh, ow] {
        return Err(shape_err!("pool backward gradient {:?}", dy.shape()));
    }
    let mut dx = Tensor::zeros(x.shape());
    let xs = x.data();
    let dys = dy.data();
    let dxs = dx.data_mut();
    for plane in 0..n * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        let g = &dys[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dxs[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = p.range(oy, h);
            for ox in 0..ow {
                let (x0, x1) = p.range(ox, w);
                let mut best = None;
                let mut m = T::neg_infinity();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let v = src[iy * w + ix];
                        if best.is_none() || v > m {
                            m = v;
                            best = Some(iy * w + ix);
                        }
                    }
                }
                if let Some(i) = best {
                    dst[i] = dst[i] + g[oy * ow + ox];
                }
            }
        }
    }
    Ok(dx)
}

/// Input gradient of average pooling; needs only the input shape.
pub fn avg_pool_backward<T: Element>(
    input_shape: &[usize],
    p: &PoolParams,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(shape_err!(
                "pool backward needs an NCHW shape, got {:?}",
                input_shape
            ))
        }
    };
    let (oh, ow) = p.output_hw(h, w)?;
    if dy.shape() != [n, c, oh, ow] {
        return Err(shape_err!("pool backward gradient {:?}", dy.shape()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let dys = dy.data();
    let dxs = dx.data_mut();
    for plane in 0..n * c {
        let g = &dys[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dxs[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = p.range(oy, h);
            for ox in 0..ow {
                let (x0, x1) = p.range(ox, w);
                let share = g[oy * ow + ox] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for iy in y0..y1 {
                    for d in &mut dst[iy * w + x0..iy * w + x1] {
                        *d = *d + share;
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Number of grid columns giving (near) square cells for a `rows`-row grid.
pub fn grid_cols(rows: usize, h: usize, w: usize) -> usize {
    // round(rows * w / h), at least one
    ((2 * rows * w + h) / (2 * h)).max(1)
}

/// Cell boundaries `round(i * n / parts)` for i = 0..=parts.
pub fn grid_bounds(n: usize, parts: usize) -> Vec<usize> {
    (0..=parts)
        .map(|i| (2 * i * n + parts) / (2 * parts))
        .collect()
}

fn check_grid(h: usize, w: usize, rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(arg_err!("grid needs at least one row and column"));
    }
    if rows > h || cols > w {
        return Err(arg_err!("grid {}x{} exceeds input {}x{}", rows, cols, h, w));
    }
    Ok(())
}

/// Average pooling over a `rows`×`cols` partition of the spatial plane.
pub fn grid_avg_pool_cells<T: Element>(
    x: &Tensor<T>,
    rows: usize,
    cols: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    check_grid(h, w, rows, cols)?;
    let by = grid_bounds(h, rows);
    let bx = grid_bounds(w, cols);
    let mut out = Tensor::zeros(&[n, c, rows, cols]);
    let xs = x.data();
    let ys = out.data_mut();
    for plane in 0..n * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        for r in 0..rows {
            for q in 0..cols {
                let mut s = T::zero();
                for iy in by[r]..by[r + 1] {
                    for &v in &src[iy * w + bx[q]..iy * w + bx[q + 1]] {
                        s = s + v;
                    }
                }
                let area = (by[r + 1] - by[r]) * (bx[q + 1] - bx[q]);
                ys[plane * rows * cols + r * cols + q] = s / T::from_f64(area as f64);
            }
        }
    }
    Ok(out)
}

/// Grid pooling with `rows` rows and square-ish cells.
pub fn grid_avg_pool<T: Element>(x: &Tensor<T>, rows: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    if rows == 0 || rows > h {
        return Err(arg_err!("grid rows {} must be in 1..={}", rows, h));
    }
    grid_avg_pool_cells(x, rows, grid_cols(rows, h, w))
}

pub fn grid_avg_pool_backward<T: Element>(
    input_shape: &[usize],
    rows: usize,
    cols: usize,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(shape_err!("grid pool backward needs NCHW shape")),
    };
    check_grid(h, w, rows, cols)?;
    if dy.shape() != [n, c, rows, cols] {
        return Err(shape_err!("grid pool gradient {:?}", dy.shape()));
    }
    let by = grid_bounds(h, rows);
    let bx = grid_bounds(w, cols);
    let mut dx = Tensor::zeros(input_shape);
    let dxs = dx.data_mut();
    for plane in 0..n * c {
        let dst = &mut dxs[plane * h * w..(plane + 1) * h * w];
        for r in 0..rows {
            for q in 0..cols {
                let area = (by[r + 1] - by[r]) * (bx[q + 1] - bx[q]);
                let share =
                    dy.data()[plane * rows * cols + r * cols + q] / T::from_f64(area as f64);
                for iy in by[r]..by[r + 1] {
                    for d in &mut dst[iy * w + bx[q]..iy * w + bx[q + 1]] {
                        *d = share;
                    }
                }
            }
        }
    }
    Ok(dx)
}
