//! Bilinear resizing with half-pixel centers (align-corners off).

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            Tap {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

/// Resize the spatial plane of an NCHW tensor. Same-size requests return an
/// exact copy.
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(arg_err!(
            "resize target {}x{} must be positive",
            out_h,
            out_w
        ));
    }
    if h == 0 || w == 0 {
        return Err(shape_err!("resize of an empty plane {:?}", x.shape()));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let xs = x.data();
    let ys = out.data_mut();
    for plane in 0..n * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        let dst = &mut ys[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::from_f64(a.frac);
            let gy = T::one() - fy;
            let r0 = &src[a.i0 * w..(a.i0 + 1) * w];
            let r1 = &src[a.i1 * w..(a.i1 + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::from_f64(b.frac);
                let gx = T::one() - fx;
                let top = gx * r0[b.i0] + fx * r0[b.i1];
                let bot = gx * r1[b.i0] + fx * r1[b.i1];
                dst[oy * out_w + ox] = gy * top + fy * bot;
            }
        }
    }
    Ok(out)
}

/// Adjoint of `bilinear_resize`: scatters output gradients back to the input plane.
pub fn bilinear_resize_backward<T: Element>(
    input_shape: &[usize],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(shape_err!(
                "resize backward needs an NCHW input shape, got {:?}",
                input_shape
            ))
        }
    };
    let (dn, dc, out_h, out_w) = dy.dims4()?;
    if dn != n || dc != c {
        return Err(shape_err!(
            "resize gradient {:?} vs input {:?}",
            dy.shape(),
            input_shape
        ));
    }
    if out_h == h && out_w == w {
        return Ok(dy.clone());
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut dx = Tensor::zeros(input_shape);
    let gs = dy.data();
    let dxs = dx.data_mut();
    for plane in 0..n * c {
        let g = &gs[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let dst = &mut dxs[plane * h * w..(plane + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::from_f64(a.frac);
            let gy = T::one() - fy;
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::from_f64(b.frac);
                let gx = T::one() - fx;
                let v = g[oy * out_w + ox];
                dst[a.i0 * w + b.i0] = dst[a.i0 * w + b.i0] + gy * gx * v;
                dst[a.i0 * w + b.i1] = dst[a.i0 * w + b.i1] + gy * fx * v;
                dst[a.i1 * w + b.i0] = dst[a.i1 * w + b.i0] + fy * gx * v;
                dst[a.i1 * w + b.i1] = dst[a.i1 * w + b.i1] + fy * fx * v;
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_bitwise_identity() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 5, 7], |i| (i as f32).sin());
        assert_eq!(bilinear_resize(&x, 5, 7).unwrap(), x);
    }

    #[test]
    fn single_pixel_broadcasts() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 1, 1], vec![0.3]).unwrap();
        let y = bilinear_resize(&x, 4, 9).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn constants_stay_constant() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 5], -2.5);
        let y = bilinear_resize(&x, 7, 4).unwrap();
        assert!(y.data().iter().all(|&v| (v + 2.5).abs() < 1e-12));
    }

    #[test]
    fn two_by_two_to_four_by_four() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        // scalar oracle: sample the half-pixel coordinate per output pixel
        let src = [[1.0, 2.0], [3.0, 4.0]];
        let coord = |d: usize| ((d as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
        for oy in 0..4 {
            for ox in 0..4 {
                let (sy, sx) = (coord(oy), coord(ox));
                let v = (1.0 - sy) * ((1.0 - sx) * src[0][0] + sx * src[0][1])
                    + sy * ((1.0 - sx) * src[1][0] + sx * src[1][1]);
                assert!((y.data()[oy * 4 + ox] - v).abs() < 1e-12);
            }
        }
        assert_eq!(&y.data()[..4], &[1.0, 1.25, 1.75, 2.0]);
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 4], |i| ((i * 7) % 5) as f64 - 2.0);
        let g = Tensor::<f64>::from_fn(&[1, 2, 6, 5], |i| ((i * 3) % 11) as f64 * 0.1);
        let y = bilinear_resize(&x, 6, 5).unwrap();
        let dx = bilinear_resize_backward(x.shape(), &g).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
