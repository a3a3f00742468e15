//! The training loop, batch-norm statistics recomputation, and evaluation.

use std::fmt::Write as _;

use super::augment::{augment, crop_or_pad, resize_image, AugmentConfig};
use super::config::Config;
use super::metrics::{argmax_classes, Confusion, MiouReport};
use super::optim::{cosine_lr, AmsGrad};
use super::targets::{composite_loss, CompositeLoss};
use crate::autograd::exec::trace_forward;
use crate::dataio::dataset::{Dataset, Sample};
use crate::dataio::image::{Image, LabelMap};
use crate::error::{arg_err, Error, Result};
use crate::kernels::norm::BnMode;
use crate::kernels::resize::bilinear_resize;
use crate::nets::Model;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Scales for multi-scale inference; each is run with and without a flip.
pub const MS_SCALES: [f64; 5] = [0.5, 0.75, 1.0, 1.5, 2.0];

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_miou";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// With running statistics; `None` when there is no validation split.
    pub val_miou: Option<f64>,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let miou = self
            .val_miou
            .map(|m| format!("{:.6}", m))
            .unwrap_or_default();
        format!(
            "{},{:.6e},{:.6},{}",
            self.epoch, self.lr, self.train_loss, miou
        )
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for e in log {
        let _ = writeln!(s, "{}", e.csv_row());
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Validation result after the final statistics recomputation.
    pub final_miou: Option<MiouReport>,
}

/// Stacks images into a batch with the mean pixel subtracted.
pub fn to_input(images: &[&Image], mean: [f64; 3]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| arg_err!("empty batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(arg_err!(
                "batch mixes {}x{} and {}x{} images",
                h,
                w,
                img.height,
                img.width
            ));
        }
        for c in 0..3 {
            let m = mean[c] as f32;
            data.extend(img.data[c * h * w..(c + 1) * h * w].iter().map(|v| v - m));
        }
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// One optimizer step on a batch that is already augmented.
pub fn train_step(
    model: &mut Model,
    opt: &mut AmsGrad,
    images: &[&Image],
    labels: &[LabelMap],
    cfg: &Config,
    mean: [f64; 3],
    lr: f64,
) -> Result<CompositeLoss> {
    let x = to_input(images, mean)?;
    let (n, _, h, w) = x.dims4()?;
    let g = model.graph(n, h, w)?;
    let (outputs, mut trace) = trace_forward(&g.graph, &mut model.store, x, &cfg.train.policy)?;
    let t = &cfg.train;
    let loss = composite_loss(
        &outputs,
        &g.heads,
        labels,
        cfg.arch.num_classes,
        crate::dataio::image::IGNORE_LABEL,
        t.final_weight,
        t.aux_weight,
    )?;
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteGradient("loss".into()));
    }
    let grads = trace.backward(&model.store, loss.grads.clone())?;
    let names: Vec<String> = model.store.specs.iter().map(|s| s.name.clone()).collect();
    opt.update(&names, &mut model.store.values, &grads, lr)?;
    Ok(loss)
}

/// Trains a fresh model on `data.train()`, calling `on_epoch` after each epoch.
pub fn train(
    cfg: &Config,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    let samples = data.train();
    if samples.is_empty() {
        return Err(arg_err!("training split is empty"));
    }
    if data.meta.num_classes != cfg.arch.num_classes {
        return Err(arg_err!(
            "dataset has {} classes, model {}",
            data.meta.num_classes,
            cfg.arch.num_classes
        ));
    }
    let mean = data.meta.mean_pixel;
    let mut model = Model::new(cfg.arch.clone(), t.seed)?;
    let sizes: Vec<usize> = model.store.values.iter().map(|v| v.len()).collect();
    let mut opt = AmsGrad::new(&sizes, t.beta1, t.beta2, t.eps, t.weight_decay);
    let aug = AugmentConfig {
        mode: t.augment,
        crop_h: t.crop,
        crop_w: t.crop,
        scale_min: t.scale_min,
        scale_max: t.scale_max,
        flip_prob: t.flip_prob,
    };
    let mut log = Vec::with_capacity(t.epochs);
    for epoch in 0..t.epochs {
        let lr = cosine_lr(epoch, t.epochs, t.base_lr)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        SplitMix64::derive(t.seed, &[1, epoch as u64]).shuffle(&mut order);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(t.batch) {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut labs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut rng = SplitMix64::derive(t.seed, &[2, epoch as u64, i as u64]);
                let (im, lab) =
                    augment(&samples[i].image, &samples[i].labels, &aug, mean, &mut rng)?;
                imgs.push(im);
                labs.push(lab);
            }
            let refs: Vec<&Image> = imgs.iter().collect();
            let loss = train_step(&mut model, &mut opt, &refs, &labs, cfg, mean, lr)?;
            loss_sum += loss.total;
            batches += 1;
        }
        let val_miou = match data.val() {
            [] => None,
            val => Some(evaluate(&mut model, val, mean, None)?.miou()?.mean),
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val_miou,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    if t.recompute_bn {
        recompute_bn_stats(&mut model, samples, t.batch, mean)?;
    }
    let final_miou = match data.val() {
        [] => None,
        val => Some(evaluate(&mut model, val, mean, None)?.miou()?),
    };
    Ok(TrainOutcome {
        model,
        log,
        final_miou,
    })
}

/// Replaces every running mean and variance with the exact moments over one
/// pass of `samples` (un-augmented, training-mode normalization upstream).
pub fn recompute_bn_stats(
    model: &mut Model,
    samples: &[Sample],
    batch: usize,
    mean: [f64; 3],
) -> Result<()> {
    if samples.is_empty() || batch == 0 {
        return Err(arg_err!(
            "statistics recomputation needs samples and a positive batch"
        ));
    }
    for r in &mut model.store.bn {
        r.reset_accumulators();
    }
    let d = model.spec.downsample_factor;
    for chunk in samples.chunks(batch) {
        let padded: Vec<Image> = chunk
            .iter()
            .map(|s| pad_to_multiple(&s.image, d, mean))
            .collect();
        let refs: Vec<&Image> = padded.iter().collect();
        let x = to_input(&refs, mean)?;
        model.forward(&x, BnMode::Accumulate)?;
    }
    for r in &mut model.store.bn {
        r.finalize_accumulated()?;
    }
    Ok(())
}

fn pad_to_multiple(img: &Image, d: usize, mean: [f64; 3]) -> Image {
    let h = img.height.div_ceil(d) * d;
    let w = img.width.div_ceil(d) * d;
    if (h, w) == (img.height, img.width) {
        return img.clone();
    }
    let dummy = LabelMap::new(img.height, img.width, 0);
    crop_or_pad(img, &dummy, 0, 0, h, w, mean).0
}

fn crop_scores(x: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (_, c, ph, pw) = x.dims4()?;
    let d = x.data();
    let mut out = Vec::with_capacity(c * h * w);
    for k in 0..c {
        for y in 0..h {
            let row = k * ph * pw + y * pw;
            out.extend_from_slice(&d[row..row + w]);
        }
    }
    Tensor::from_vec(&[1, c, h, w], out)
}

fn softmax_channels(x: &mut Tensor<f32>) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    let plane = h * w;
    let d = x.data_mut();
    for p in 0..plane {
        let m = (0..c)
            .map(|k| d[k * plane + p])
            .fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f64;
        for k in 0..c {
            let e = ((d[k * plane + p] - m) as f64).exp();
            d[k * plane + p] = e as f32;
            z += e;
        }
        for k in 0..c {
            d[k * plane + p] = (d[k * plane + p] as f64 / z) as f32;
        }
    }
    Ok(())
}

/// Final-head logits at the image's resolution. The image is padded on the
/// bottom and right with the mean pixel up to a multiple of the
/// downsampling factor.
pub fn predict_logits(model: &mut Model, img: &Image, mean: [f64; 3]) -> Result<Tensor<f32>> {
    let padded = pad_to_multiple(img, model.spec.downsample_factor, mean);
    let x = to_input(&[&padded], mean)?;
    let y = model.predict(&x)?;
    crop_scores(&y, img.height, img.width)
}

pub fn predict_labels(model: &mut Model, img: &Image, mean: [f64; 3]) -> Result<Vec<u8>> {
    argmax_classes(&predict_logits(model, img, mean)?)
}

/// Class probabilities averaged over `scales` (and horizontal flips when
/// `flips`), at the original resolution.
pub fn multi_scale_probs(
    model: &mut Model,
    img: &Image,
    mean: [f64; 3],
    scales: &[f64],
    flips: bool,
) -> Result<Tensor<f32>> {
    if scales.is_empty() {
        return Err(arg_err!("no inference scales"));
    }
    let (h, w) = (img.height, img.width);
    let mut acc: Option<Tensor<f32>> = None;
    for &s in scales {
        let sh = ((h as f64 * s).round() as usize).max(1);
        let sw = ((w as f64 * s).round() as usize).max(1);
        let scaled = if (sh, sw) == (h, w) {
            img.clone()
        } else {
            resize_image(img, sh, sw)?
        };
        for flip in [false, true].into_iter().take(1 + flips as usize) {
            let input = if flip {
                scaled.flip_horizontal()
            } else {
                scaled.clone()
            };
            let logits = predict_logits(model, &input, mean)?;
            let mut p = if (sh, sw) == (h, w) {
                logits
            } else {
                bilinear_resize(&logits, h, w)?
            };
            if flip {
                p = flip_scores(&p)?;
            }
            softmax_channels(&mut p)?;
            acc = Some(match acc {
                None => p,
                Some(mut a) => {
                    a.data_mut()
                        .iter_mut()
                        .zip(p.data())
                        .for_each(|(a, b)| *a += b);
                    a
                }
            });
        }
    }
    let mut out = acc.expect("at least one scale");
    let k = 1.0 / ((1 + flips as usize) * scales.len()) as f32;
    out.data_mut().iter_mut().for_each(|v| *v *= k);
    Ok(out)
}

fn flip_scores(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, c, h, w) = x.dims4()?;
    let d = x.data();
    Tensor::from_vec(
        x.shape(),
        (0..n * c * h * w)
            .map(|i| d[i - i % w + (w - 1 - i % w)])
            .collect(),
    )
}

/// Multi-scale inference settings for [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScale {
    pub scales: Vec<f64>,
    pub flips: bool,
}

impl Default for MultiScale {
    fn default() -> Self {
        MultiScale {
            scales: MS_SCALES.to_vec(),
            flips: true,
        }
    }
}

/// Confusion matrix over `samples` with running statistics; single-scale
/// when `ms` is `None`.
pub fn evaluate(
    model: &mut Model,
    samples: &[Sample],
    mean: [f64; 3],
    ms: Option<&MultiScale>,
) -> Result<Confusion> {
    let mut conf = Confusion::new(model.spec.num_classes);
    for s in samples {
        let pred = match ms {
            Some(ms) => argmax_classes(&multi_scale_probs(
                model, &s.image, mean, &ms.scales, ms.flips,
            )?)?,
            None => predict_labels(model, &s.image, mean)?,
        };
        conf.add(&pred, &s.labels, crate::dataio::image::IGNORE_LABEL)?;
    }
    Ok(conf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{render, SynthSpec};
    use crate::nets::ArchSpec;

    fn tiny_arch() -> ArchSpec {
        let mut a = ArchSpec::toy();
        a.num_classes = 5;
        a
    }

    #[test]
    fn flip_scores_reverses_rows() {
        let t = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(flip_scores(&t).unwrap().data(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn padded_prediction_matches_size() {
        let spec = SynthSpec {
            height: 70,
            width: 90,
            ..SynthSpec::default()
        };
        let (img, _) = render(&spec, 0);
        let mut m = Model::new(tiny_arch(), 0).unwrap();
        let x = to_input(&[&pad_to_multiple(&img, 64, [0.5; 3])], [0.5; 3]).unwrap();
        m.forward(&x, BnMode::Train).unwrap();
        assert_eq!(
            predict_labels(&mut m, &img, [0.5; 3]).unwrap().len(),
            70 * 90
        );
        let p = multi_scale_probs(&mut m, &img, [0.5; 3], &[1.0, 0.5], true).unwrap();
        assert_eq!(p.shape(), &[1, 5, 70, 90]);
        let col: f32 = (0..5).map(|k| p.data()[k * 70 * 90]).sum();
        assert!((col - 1.0).abs() < 1e-5);
    }

    #[test]
    fn recompute_on_one_batch_equals_its_statistics() {
        let spec = SynthSpec {
            height: 64,
            width: 64,
            ..SynthSpec::default()
        };
        let samples: Vec<Sample> = (0..2)
            .map(|i| {
                let (image, labels) = render(&spec, i);
                Sample { image, labels }
            })
            .collect();
        let mut m = Model::new(tiny_arch(), 0).unwrap();
        recompute_bn_stats(&mut m, &samples, 2, [0.5; 3]).unwrap();
        let once = m.store.bn.clone();
        // training-mode moving averages seeded by the same single batch
        let mut fresh = Model::new(tiny_arch(), 0).unwrap();
        let refs: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        fresh
            .forward(&to_input(&refs, [0.5; 3]).unwrap(), BnMode::Train)
            .unwrap();
        for (a, b) in once.iter().zip(&fresh.store.bn) {
            assert_eq!(a.mean, b.mean);
            assert_eq!(a.var, b.var);
        }
        assert!(recompute_bn_stats(&mut m, &[], 2, [0.5; 3]).is_err());
    }
}
