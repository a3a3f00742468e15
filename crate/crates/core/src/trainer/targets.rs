//! Soft per-window targets and the weighted multi-head loss.

use crate::dataio::image::LabelMap;
use crate::error::{arg_err, Result};
use crate::kernels::loss::softmax_cross_entropy;
use crate::kernels::pool::grid_bounds;
use crate::nets::ladder::{HeadInfo, HeadKind};
use crate::tensor::Tensor;

/// Class histograms over a `out_h`×`out_w` partition of the label map with
/// cell edges at `round(i·H/out_h)`. Ignored labels are skipped; a cell with
/// no valid label yields an all-zero (masked) column.
pub fn soft_targets_grid(
    labels: &LabelMap,
    out_h: usize,
    out_w: usize,
    num_classes: usize,
    ignore: u8,
) -> Result<Tensor<f32>> {
    if out_h == 0 || out_w == 0 || out_h > labels.height || out_w > labels.width {
        return Err(arg_err!(
            "cannot partition {}x{} labels into {}x{} cells",
            labels.height,
            labels.width,
            out_h,
            out_w
        ));
    }
    let rows = grid_bounds(labels.height, out_h);
    let cols = grid_bounds(labels.width, out_w);
    let plane = out_h * out_w;
    let mut out = Tensor::zeros(&[1, num_classes, out_h, out_w]);
    let data = out.data_mut();
    let mut hist = vec![0u32; num_classes];
    for i in 0..out_h {
        for j in 0..out_w {
            hist.fill(0);
            let mut valid = 0u32;
            for y in rows[i]..rows[i + 1] {
                for x in cols[j]..cols[j + 1] {
                    let v = labels.get(y, x);
                    if v == ignore {
                        continue;
                    }
                    let c = v as usize;
                    if c >= num_classes {
                        return Err(arg_err!(
                            "label {} out of range for {} classes",
                            v,
                            num_classes
                        ));
                    }
                    hist[c] += 1;
                    valid += 1;
                }
            }
            if valid > 0 {
                for (c, &n) in hist.iter().enumerate() {
                    data[c * plane + i * out_w + j] = (n as f64 / valid as f64) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Label distribution in each `n`×`n` window; H and W must be divisible by `n`.
pub fn soft_targets(
    labels: &LabelMap,
    n: usize,
    num_classes: usize,
    ignore: u8,
) -> Result<Tensor<f32>> {
    if n == 0 || labels.height % n != 0 || labels.width % n != 0 {
        return Err(arg_err!(
            "{}x{} labels are not divisible into {}x{} windows",
            labels.height,
            labels.width,
            n,
            n
        ));
    }
    soft_targets_grid(
        labels,
        labels.height / n,
        labels.width / n,
        num_classes,
        ignore,
    )
}

/// Targets for a whole batch at the given output size, stacked along N.
/// When the size tiles the labels exactly the cells are the `n`×`n` windows.
pub fn batch_soft_targets(
    labels: &[LabelMap],
    out_h: usize,
    out_w: usize,
    num_classes: usize,
    ignore: u8,
) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(labels.len() * num_classes * out_h * out_w);
    for l in labels {
        data.extend_from_slice(soft_targets_grid(l, out_h, out_w, num_classes, ignore)?.data());
    }
    Tensor::from_vec(&[labels.len(), num_classes, out_h, out_w], data)
}

#[derive(Clone, Debug)]
pub struct CompositeLoss {
    pub total: f64,
    pub final_loss: f64,
    /// Loss per auxiliary head, in head order.
    pub aux_losses: Vec<f64>,
    /// Gradient for every graph output, ready for the backward pass.
    pub grads: Vec<Option<Tensor<f32>>>,
}

/// `final_weight · CE(final) + aux_weight · mean CE(aux)`. Without auxiliary
/// heads the final loss carries the whole weight.
pub fn composite_loss(
    outputs: &[Tensor<f32>],
    heads: &[HeadInfo],
    labels: &[LabelMap],
    num_classes: usize,
    ignore: u8,
    final_weight: f64,
    aux_weight: f64,
) -> Result<CompositeLoss> {
    if outputs.len() != heads.len() || heads.is_empty() || heads[0].kind != HeadKind::Final {
        return Err(arg_err!(
            "expected the final head first and one output per head"
        ));
    }
    let n_aux = heads.len() - 1;
    let mut grads = Vec::with_capacity(outputs.len());
    let mut final_loss = 0.0;
    let mut aux_losses = Vec::with_capacity(n_aux);
    let mut total = 0.0;
    for (i, out) in outputs.iter().enumerate() {
        let (_, _, oh, ow) = out.dims4()?;
        let target = batch_soft_targets(labels, oh, ow, num_classes, ignore)?;
        let ce = softmax_cross_entropy(out, &target)?;
        let weight = match (i, n_aux) {
            (0, 0) => 1.0,
            (0, _) => final_weight,
            _ => aux_weight / n_aux as f64,
        };
        total += weight * ce.loss;
        if i == 0 {
            final_loss = ce.loss;
        } else {
            aux_losses.push(ce.loss);
        }
        let w = weight as f32;
        grads.push(Some(ce.grad.map(|g| g * w)));
    }
    Ok(CompositeLoss {
        total,
        final_loss,
        aux_losses,
        grads,
    })
}
