//! Procedural scenes of coloured shapes with per-pixel labels.

use serde::{Deserialize, Serialize};

use super::image::{Image, LabelMap};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const CLASS_NAMES: [&str; 5] = ["background", "disk", "rectangle", "triangle", "ring"];

pub const PALETTE: [[u8; 3]; 5] = [
    [64, 64, 64],
    [220, 60, 50],
    [50, 180, 80],
    [50, 90, 220],
    [230, 200, 50],
];

const BASE_COLORS: [[f64; 3]; 4] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.7, 0.3],
    [0.2, 0.35, 0.85],
    [0.9, 0.8, 0.2],
];

fn d_classes() -> usize {
    5
}
fn d_size() -> usize {
    128
}
fn d_min_shapes() -> usize {
    3
}
fn d_max_shapes() -> usize {
    7
}
fn d_noise() -> f64 {
    0.04
}
fn d_count() -> usize {
    500
}
fn d_val() -> usize {
    100
}
fn d_small() -> f64 {
    0.35
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Background plus up to four shape classes.
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_size")]
    pub height: usize,
    #[serde(default = "d_size")]
    pub width: usize,
    #[serde(default = "d_min_shapes")]
    pub min_shapes: usize,
    #[serde(default = "d_max_shapes")]
    pub max_shapes: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    #[serde(default = "d_noise")]
    pub noise: f64,
    /// Probability that a shape is small (under 12 px across).
    #[serde(default = "d_small")]
    pub small_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Training images.
    #[serde(default = "d_count")]
    pub count: usize,
    /// Validation images, stored after the training ones.
    #[serde(default = "d_val")]
    pub val_count: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::Spec(format!(
                "num_classes must be in 2..=5, got {}",
                self.num_classes
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Spec(format!(
                "images must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Spec(format!(
                "bad shape count range {}..={}",
                self.min_shapes, self.max_shapes
            )));
        }
        if !(0.0..=0.5).contains(&self.noise) || !(0.0..=1.0).contains(&self.small_fraction) {
            return Err(Error::Spec(
                "noise must be in [0, 0.5] and small_fraction in [0, 1]".into(),
            ));
        }
        if self.count == 0 {
            return Err(Error::Spec(
                "at least one training image is required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disk { r: f64 },
    Rect { hw: f64, hh: f64 },
    Triangle { r: f64, theta: f64 },
    Ring { r: f64, inner: f64 },
}

impl Shape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Disk { r } => dx * dx + dy * dy <= r * r,
            Shape::Rect { hw, hh } => dx.abs() <= hw && dy.abs() <= hh,
            Shape::Ring { r, inner } => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= inner * inner
            }
            Shape::Triangle { r, theta } => {
                let v: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = theta + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                        (r * a.cos(), r * a.sin())
                    })
                    .collect();
                let side = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
                };
                let s = [side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0])];
                s.iter().all(|&x| x >= 0.0) || s.iter().all(|&x| x <= 0.0)
            }
        }
    }

    fn extent(&self) -> f64 {
        match *self {
            Shape::Disk { r } | Shape::Triangle { r, .. } | Shape::Ring { r, .. } => r,
            Shape::Rect { hw, hh } => hw.max(hh),
        }
    }
}

/// Renders sample `index` of the dataset described by `spec`.
pub fn render(spec: &SynthSpec, index: usize) -> (Image, LabelMap) {
    let (h, w) = (spec.height, spec.width);
    let mut rng = SplitMix64::derive(spec.seed, &[index as u64]);

    // low-saturation background with a linear gradient
    let grey = rng.uniform(0.3, 0.6);
    let tint: Vec<f64> = (0..3).map(|_| grey + rng.uniform(-0.05, 0.05)).collect();
    let gx = rng.uniform(-0.15, 0.15);
    let gy = rng.uniform(-0.15, 0.15);
    let mut img = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let t = gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
            for (c, &base) in tint.iter().enumerate() {
                img.set(c, y, x, (base + t) as f32);
            }
        }
    }
    let mut labels = LabelMap::new(h, w, 0);

    let shapes =
        spec.min_shapes + rng.below((spec.max_shapes - spec.min_shapes + 1) as u64) as usize;
    for _ in 0..shapes {
        let class = 1 + rng.below((spec.num_classes - 1) as u64) as usize;
        let r = if rng.bernoulli(spec.small_fraction) {
            rng.uniform(3.0, 5.5)
        } else {
            rng.uniform(8.0, 28.0)
        };
        let shape = match class {
            1 => Shape::Disk { r },
            2 => Shape::Rect {
                hw: r * rng.uniform(0.6, 1.0),
                hh: r * rng.uniform(0.6, 1.0),
            },
            3 => Shape::Triangle {
                r: r * 1.2,
                theta: rng.uniform(0.0, 2.0 * std::f64::consts::PI),
            },
            _ => Shape::Ring {
                r: r.max(4.0),
                inner: 0.55 * r.max(4.0),
            },
        };
        let cx = rng.uniform(0.0, w as f64);
        let cy = rng.uniform(0.0, h as f64);
        let color: Vec<f32> = BASE_COLORS[class - 1]
            .iter()
            .map(|&b| (b + rng.uniform(-0.1, 0.1)).clamp(0.0, 1.0) as f32)
            .collect();
        let e = shape.extent().ceil() + 1.0;
        let y0 = (cy - e).floor().max(0.0) as usize;
        let y1 = ((cy + e).ceil() as usize).min(h);
        let x0 = (cx - e).floor().max(0.0) as usize;
        let x1 = ((cx + e).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                if shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy) {
                    labels.set(y, x, class as u8);
                    for (c, &v) in color.iter().enumerate() {
                        img.set(c, y, x, v);
                    }
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for v in img.data.iter_mut() {
            *v = (*v as f64 + spec.noise * rng.normal()).clamp(0.0, 1.0) as f32;
        }
    }
    (img, labels)
}
