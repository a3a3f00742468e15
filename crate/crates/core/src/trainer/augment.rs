//! Random flip, rescale and crop of an image with its labels.

use serde::{Deserialize, Serialize};

use crate::dataio::image::{Image, LabelMap, IGNORE_LABEL};
use crate::error::Result;
use crate::kernels::resize::bilinear_resize;
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Centered crop (or pad) only.
    None,
    Flip,
    FlipCrop,
    FlipCropScale,
}

impl AugmentMode {
    fn flips(self) -> bool {
        self != AugmentMode::None
    }

    fn random_crop(self) -> bool {
        matches!(self, AugmentMode::FlipCrop | AugmentMode::FlipCropScale)
    }

    fn scales(self) -> bool {
        self == AugmentMode::FlipCropScale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub mode: AugmentMode,
    pub crop_h: usize,
    pub crop_w: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
}

/// Nearest-neighbour label resize using pixel centres.
pub fn resize_labels(labels: &LabelMap, h: usize, w: usize) -> LabelMap {
    let mut out = LabelMap::new(h, w, IGNORE_LABEL);
    for y in 0..h {
        let sy =
            (((y as f64 + 0.5) * labels.height as f64 / h as f64) as usize).min(labels.height - 1);
        for x in 0..w {
            let sx = (((x as f64 + 0.5) * labels.width as f64 / w as f64) as usize)
                .min(labels.width - 1);
            out.set(y, x, labels.get(sy, sx));
        }
    }
    out
}

pub fn resize_image(img: &Image, h: usize, w: usize) -> Result<Image> {
    let t = bilinear_resize(&img.to_tensor(), h, w)?;
    Image::from_tensor(&t, 0)
}

/// Window of size `crop` starting at signed offset (`oy`, `ox`); pixels that
/// fall outside take the mean colour and the ignore label.
pub fn crop_or_pad(
    img: &Image,
    labels: &LabelMap,
    oy: isize,
    ox: isize,
    crop_h: usize,
    crop_w: usize,
    mean: [f64; 3],
) -> (Image, LabelMap) {
    let mut out = Image::filled(crop_h, crop_w, mean.map(|m| m as f32));
    let mut lab = LabelMap::new(crop_h, crop_w, IGNORE_LABEL);
    for y in 0..crop_h {
        let sy = y as isize + oy;
        if sy < 0 || sy >= img.height as isize {
            continue;
        }
        for x in 0..crop_w {
            let sx = x as isize + ox;
            if sx < 0 || sx >= img.width as isize {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            for c in 0..3 {
                out.set(c, y, x, img.get(c, sy, sx));
            }
            lab.set(y, x, labels.get(sy, sx));
        }
    }
    (out, lab)
}

fn offset(extent: usize, crop: usize, random: bool, rng: &mut SplitMix64) -> isize {
    let slack = extent as isize - crop as isize;
    if !random {
        return slack.div_euclid(2);
    }
    let (lo, hi) = if slack >= 0 { (0, slack) } else { (slack, 0) };
    lo + rng.below((hi - lo + 1) as u64) as isize
}

/// Applies the augmentations enabled by `cfg.mode` in the order scale, flip, crop.
pub fn augment(
    img: &Image,
    labels: &LabelMap,
    cfg: &AugmentConfig,
    mean: [f64; 3],
    rng: &mut SplitMix64,
) -> Result<(Image, LabelMap)> {
    let (mut im, mut lab) = (img.clone(), labels.clone());
    if cfg.mode.scales() {
        let s = rng.uniform(cfg.scale_min, cfg.scale_max);
        let h = ((img.height as f64 * s).round() as usize).max(1);
        let w = ((img.width as f64 * s).round() as usize).max(1);
        im = resize_image(&im, h, w)?;
        lab = resize_labels(&lab, h, w);
    }
    if cfg.mode.flips() && rng.bernoulli(cfg.flip_prob) {
        im = im.flip_horizontal();
        lab = lab.flip_horizontal();
    }
    let random = cfg.mode.random_crop();
    let oy = offset(im.height, cfg.crop_h, random, rng);
    let ox = offset(im.width, cfg.crop_w, random, rng);
    Ok(crop_or_pad(&im, &lab, oy, ox, cfg.crop_h, cfg.crop_w, mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{render, SynthSpec};

    fn cfg(mode: AugmentMode, crop: usize) -> AugmentConfig {
        AugmentConfig {
            mode,
            crop_h: crop,
            crop_w: crop,
            scale_min: 0.5,
            scale_max: 2.0,
            flip_prob: 0.5,
        }
    }

    #[test]
    fn no_augmentation_is_identity() {
        let spec = SynthSpec {
            height: 32,
            width: 32,
            ..SynthSpec::default()
        };
        let (img, lab) = render(&spec, 0);
        let mut rng = SplitMix64::new(0);
        let (a, b) = augment(&img, &lab, &cfg(AugmentMode::None, 32), [0.5; 3], &mut rng).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, lab);
    }

    #[test]
    fn seeded_output_is_reproducible() {
        let spec = SynthSpec {
            height: 32,
            width: 32,
            ..SynthSpec::default()
        };
        let (img, lab) = render(&spec, 1);
        let run = || {
            let mut rng = SplitMix64::new(42);
            augment(
                &img,
                &lab,
                &cfg(AugmentMode::FlipCropScale, 24),
                [0.5; 3],
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn scaled_labels_keep_their_values() {
        let spec = SynthSpec {
            height: 40,
            width: 40,
            ..SynthSpec::default()
        };
        let (img, lab) = render(&spec, 2);
        let mut allowed: Vec<u8> = lab.data.clone();
        allowed.push(IGNORE_LABEL);
        for seed in 0..10 {
            let mut rng = SplitMix64::new(seed);
            let (_, l) = augment(
                &img,
                &lab,
                &cfg(AugmentMode::FlipCropScale, 48),
                [0.5; 3],
                &mut rng,
            )
            .unwrap();
            assert!(l.data.iter().all(|v| allowed.contains(v)));
        }
    }

    #[test]
    fn padding_uses_mean_and_ignore() {
        let img = Image::filled(2, 2, [1.0; 3]);
        let lab = LabelMap::new(2, 2, 1);
        let (i, l) = crop_or_pad(&img, &lab, -1, -1, 4, 4, [0.25; 3]);
        assert_eq!(i.get(0, 0, 0), 0.25);
        assert_eq!(i.get(0, 1, 1), 1.0);
        assert_eq!(l.get(0, 0), IGNORE_LABEL);
        assert_eq!(l.get(2, 2), 1);
    }
}
