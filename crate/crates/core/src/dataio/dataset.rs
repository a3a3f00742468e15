//! On-disk dataset layout: `images/NNNN.ppm`, `labels/NNNN.pgm`, `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{read_pgm, read_ppm, write_pgm, write_ppm, Image, LabelMap, IGNORE_LABEL};
use super::synth::{render, SynthSpec, CLASS_NAMES, PALETTE};
use crate::error::{Error, Result};
use crate::tensor::fnv1a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
    /// Mean RGB of the training images, in [0, 1].
    pub mean_pixel: [f64; 3],
    pub ignore_label: u8,
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub val_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMap,
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{:04}.ppm", i))
}

fn label_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("labels").join(format!("{:04}.pgm", i))
}

/// Writes `spec.count` training and `spec.val_count` validation samples.
pub fn generate_synthetic(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<Meta> {
    spec.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut sum = [0.0f64; 3];
    for i in 0..spec.count + spec.val_count {
        let (img, labels) = render(spec, i);
        write_ppm(image_path(dir, i), &img)?;
        write_pgm(label_path(dir, i), &labels)?;
        if i < spec.count {
            // mean of the stored 8-bit values, so it is reproducible from disk
            let stored = Image::from_rgb8(img.height, img.width, &img.to_rgb8())?;
            let plane = img.height * img.width;
            for (c, s) in sum.iter_mut().enumerate() {
                *s += stored.data[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
        }
    }
    let pixels = (spec.count * spec.height * spec.width) as f64;
    let meta = Meta {
        num_classes: spec.num_classes,
        class_names: CLASS_NAMES[..spec.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        palette: PALETTE[..spec.num_classes].to_vec(),
        mean_pixel: sum.map(|s| s / pixels),
        ignore_label: IGNORE_LABEL,
        height: spec.height,
        width: spec.width,
        train_count: spec.count,
        val_count: spec.val_count,
        synth: Some(spec.clone()),
    };
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    Ok(meta)
}

/// A fully loaded dataset; training samples come first.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: Meta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.palette.len() < meta.num_classes {
            return Err(Error::Format(
                "palette has fewer entries than classes".into(),
            ));
        }
        let mut samples = Vec::with_capacity(meta.train_count + meta.val_count);
        for i in 0..meta.train_count + meta.val_count {
            let image = read_ppm(image_path(dir, i))?;
            let labels = read_pgm(label_path(dir, i))?;
            if (image.height, image.width) != (labels.height, labels.width) {
                return Err(Error::Format(format!(
                    "sample {} has mismatched image and label sizes",
                    i
                )));
            }
            labels.check_range(meta.num_classes)?;
            samples.push(Sample { image, labels });
        }
        Ok(Dataset { meta, samples })
    }

    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.meta.train_count]
    }

    pub fn val(&self) -> &[Sample] {
        &self.samples[self.meta.train_count..]
    }
}

/// FNV-1a over the meta file and every image and label file in order.
pub fn dataset_checksum(dir: impl AsRef<Path>) -> Result<u64> {
    let dir = dir.as_ref();
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let mut bytes = fs::read(dir.join("meta.json"))?;
    for i in 0..meta.train_count + meta.val_count {
        bytes.extend(fs::read(image_path(dir, i))?);
        bytes.extend(fs::read(label_path(dir, i))?);
    }
    Ok(fnv1a(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            count: 4,
            val_count: 2,
            height: 32,
            width: 48,
            ..SynthSpec::default()
        };
        let meta = generate_synthetic(&spec, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.meta, meta);
        assert_eq!(ds.train().len(), 4);
        assert_eq!(ds.val().len(), 2);
        assert_eq!(ds.samples[0].labels, render(&spec, 0).1);
        assert!(meta.mean_pixel.iter().all(|&m| m > 0.0 && m < 1.0));
    }
}
