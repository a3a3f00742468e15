//! The JSON run configuration: architecture, training, and data sections.

use serde::{Deserialize, Serialize};

use super::augment::AugmentMode;
use crate::autograd::policy::CheckpointPolicy;
use crate::dataio::synth::SynthSpec;
use crate::error::{Error, Result};
use crate::nets::spec::ArchSpec;

fn d_lr() -> f64 {
    4e-4
}
fn d_epochs() -> usize {
    30
}
fn d_batch() -> usize {
    8
}
fn d_crop() -> usize {
    128
}
fn d_scale_min() -> f64 {
    0.5
}
fn d_scale_max() -> f64 {
    2.0
}
fn d_half() -> f64 {
    0.5
}
fn d_final() -> f64 {
    0.6
}
fn d_aux() -> f64 {
    0.4
}
fn d_divisor() -> f64 {
    4.0
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_augment() -> AugmentMode {
    AugmentMode::FlipCropScale
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    /// Square training crop; must be a multiple of the downsampling factor.
    #[serde(default = "d_crop")]
    pub crop: usize,
    #[serde(default = "d_scale_min")]
    pub scale_min: f64,
    #[serde(default = "d_scale_max")]
    pub scale_max: f64,
    #[serde(default = "d_half")]
    pub flip_prob: f64,
    #[serde(default = "d_augment")]
    pub augment: AugmentMode,
    #[serde(default = "d_final")]
    pub final_weight: f64,
    #[serde(default = "d_aux")]
    pub aux_weight: f64,
    /// Learning-rate divisor for pretrained parameters (none exist here).
    #[serde(default = "d_divisor")]
    pub pretrained_lr_divisor: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default)]
    pub policy: CheckpointPolicy,
    /// Replace running BN statistics with exact training-set averages at the end.
    #[serde(default = "d_true")]
    pub recompute_bn: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "ArchSpec::toy")]
    pub arch: ArchSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: SynthSpec,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            arch: ArchSpec::toy(),
            train: TrainConfig::default(),
            data: SynthSpec::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.data.validate()?;
        let t = &self.train;
        let bad = |m: String| Err(Error::Spec(m));
        if t.epochs == 0 || t.batch == 0 {
            return bad("epochs and batch must be positive".into());
        }
        if !(t.base_lr > 0.0 && t.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", t.base_lr));
        }
        if t.crop == 0 || t.crop % self.arch.downsample_factor != 0 {
            return bad(format!(
                "crop {} must be a positive multiple of the downsampling factor {}",
                t.crop, self.arch.downsample_factor
            ));
        }
        if !(t.scale_min > 0.0 && t.scale_min <= t.scale_max) {
            return bad(format!(
                "bad scale range [{}, {}]",
                t.scale_min, t.scale_max
            ));
        }
        if !(0.0..=1.0).contains(&t.flip_prob) {
            return bad(format!("flip_prob {} outside [0, 1]", t.flip_prob));
        }
        if (t.final_weight + t.aux_weight - 1.0).abs() > 1e-9
            || t.final_weight < 0.0
            || t.aux_weight < 0.0
        {
            return bad(format!(
                "loss weights {} + {} must sum to 1",
                t.final_weight, t.aux_weight
            ));
        }
        if self.arch.num_classes != self.data.num_classes {
            return bad(format!(
                "model predicts {} classes but the data has {}",
                self.arch.num_classes, self.data.num_classes
            ));
        }
        Ok(())
    }
}
