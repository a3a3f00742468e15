use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU expressed through its output.
pub fn relu_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != dy.shape() {
        return Err(shape_err!(
            "relu backward: {:?} vs {:?}",
            y.shape(),
            dy.shape()
        ));
    }
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(y.shape(), data)
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err!("add: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// In-place `acc += x`.
pub fn add_assign<T: Element>(acc: &mut Tensor<T>, x: &Tensor<T>) -> Result<()> {
    if acc.shape() != x.shape() {
        return Err(shape_err!(
            "accumulate: {:?} vs {:?}",
            acc.shape(),
            x.shape()
        ));
    }
    for (a, &b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a = *a + b;
    }
    Ok(())
}

/// Shape of the channel concatenation, validating all other extents.
pub fn concat_shape(shapes: &[&[usize]]) -> Result<Vec<usize>> {
    let first = shapes
        .first()
        .ok_or_else(|| shape_err!("concat of an empty list"))?;
    if first.len() != 4 {
        return Err(shape_err!("concat expects NCHW tensors, got {:?}", first));
    }
    let mut c = 0;
    for s in shapes {
        if s.len() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
            return Err(shape_err!("concat extent mismatch: {:?} vs {:?}", s, first));
        }
        c += s[1];
    }
    Ok(vec![first[0], c, first[2], first[3]])
}

/// Channel-axis concatenation preserving input order.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shapes: Vec<&[usize]> = parts.iter().map(|t| t.shape()).collect();
    let out_shape = concat_shape(&shapes)?;
    let (n, plane) = (out_shape[0], out_shape[2] * out_shape[3]);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for b in 0..n {
        for t in parts {
            let chunk = t.shape()[1] * plane;
            data.extend_from_slice(&t.data()[b * chunk..(b + 1) * chunk]);
        }
    }
    Tensor::from_vec(&out_shape, data)
}

/// Splits an NCHW tensor along channels into pieces of the given widths.
pub fn split_channels<T: Element>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = x.dims4()?;
    if widths.iter().sum::<usize>() != c {
        return Err(shape_err!(
            "split widths {:?} do not sum to {} channels",
            widths,
            c
        ));
    }
    let plane = h * w;
    let mut out: Vec<Vec<T>> = widths
        .iter()
        .map(|&wd| Vec::with_capacity(n * wd * plane))
        .collect();
    for b in 0..n {
        let mut off = (b * c) * plane;
        for (piece, &wd) in out.iter_mut().zip(widths) {
            piece.extend_from_slice(&x.data()[off..off + wd * plane]);
            off += wd * plane;
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(d, &wd)| Tensor::from_vec(&[n, wd, h, w], d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f32>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 2, 2], |i| i as f32 - 3.5);
        assert_eq!(add(&x, &Tensor::zeros(x.shape())).unwrap(), x);
        assert!(add(&x, &Tensor::zeros(&[1, 2, 2, 1])).is_err());
    }

    #[test]
    fn concat_preserves_order() {
        let a = Tensor::<f32>::from_fn(&[2, 3, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 5, 2, 2], |i| -(i as f32));
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 8, 2, 2]);
        assert_eq!(c.channel_slice(0, 3).unwrap(), a);
        assert_eq!(c.channel_slice(3, 8).unwrap(), b);
        let parts = split_channels(&c, &[3, 5]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let b = Tensor::<f32>::zeros(&[1, 1, 2, 3]);
        assert!(concat_channels(&[&a, &b]).is_err());
    }
}
