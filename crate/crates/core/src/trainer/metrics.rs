//! Confusion matrix and mean intersection-over-union.

use crate::dataio::image::LabelMap;
use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub num_classes: usize,
    /// Row = ground truth, column = prediction.
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub mean: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(arg_err!(
                "{} counts for {} classes",
                counts.len(),
                num_classes
            ));
        }
        Ok(Confusion {
            num_classes,
            counts,
        })
    }

    /// Adds one prediction map; ground-truth pixels equal to `ignore` are skipped.
    pub fn add(&mut self, pred: &[u8], truth: &LabelMap, ignore: u8) -> Result<()> {
        if pred.len() != truth.data.len() {
            return Err(arg_err!(
                "prediction has {} pixels, labels {}",
                pred.len(),
                truth.data.len()
            ));
        }
        let n = self.num_classes;
        for (&p, &t) in pred.iter().zip(&truth.data) {
            if t == ignore {
                continue;
            }
            if p as usize >= n || t as usize >= n {
                return Err(arg_err!(
                    "class {} or {} out of range for {} classes",
                    p,
                    t,
                    n
                ));
            }
            self.counts[t as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn miou(&self) -> Result<MiouReport> {
        if self.total() == 0 {
            return Err(arg_err!("confusion matrix is empty"));
        }
        let n = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let tp = self.counts[c * n + c];
                let gt: u64 = self.counts[c * n..(c + 1) * n].iter().sum();
                let pred: u64 = (0..n).map(|r| self.counts[r * n + c]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        Ok(MiouReport {
            mean: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        })
    }
}

/// Per-pixel argmax over channels of a `[1, C, H, W]` tensor; ties go to the
/// lowest class.
pub fn argmax_classes(scores: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, c, h, w) = scores.dims4()?;
    if n != 1 || c == 0 || c > 255 {
        return Err(arg_err!(
            "argmax needs one image with 1..=255 channels, got {:?}",
            scores.shape()
        ));
    }
    let plane = h * w;
    let d = scores.data();
    Ok((0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * plane + p] > d[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}
