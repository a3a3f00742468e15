//! Declarative architecture description.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Backbone {
    Dn121,
    Dn169,
    Dn161,
    Rn50,
    Rn18,
    Toy { n: Vec<usize>, k: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Dense {
        k: usize,
    },
    /// Pre-activation bottleneck residual units.
    Bottleneck,
    /// Pre-activation basic (two 3×3) residual units.
    Basic,
}

impl Backbone {
    pub fn family(&self) -> Family {
        match self {
            Backbone::Dn121 | Backbone::Dn169 => Family::Dense { k: 32 },
            Backbone::Dn161 => Family::Dense { k: 48 },
            Backbone::Toy { k, .. } => Family::Dense { k: *k },
            Backbone::Rn50 => Family::Bottleneck,
            Backbone::Rn18 => Family::Basic,
        }
    }

    /// Units per block.
    pub fn units(&self) -> Vec<usize> {
        match self {
            Backbone::Dn121 => vec![6, 12, 24, 16],
            Backbone::Dn169 => vec![6, 12, 32, 32],
            Backbone::Dn161 => vec![6, 12, 36, 24],
            Backbone::Rn50 => vec![3, 4, 6, 3],
            Backbone::Rn18 => vec![2, 2, 2, 2],
            Backbone::Toy { n, .. } => n.clone(),
        }
    }

    pub fn default_stem_width(&self) -> usize {
        match self {
            Backbone::Dn161 => 96,
            _ => 64,
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.family(), Family::Dense { .. })
    }
}

fn default_32() -> usize {
    32
}
fn default_4() -> usize {
    4
}
fn default_width() -> usize {
    128
}
fn default_true() -> bool {
    true
}
fn default_classes() -> usize {
    19
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub backbone: Backbone,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem_width: Option<usize>,
    #[serde(default = "default_32")]
    pub downsample_factor: usize,
    #[serde(default = "default_4")]
    pub output_stride: usize,
    /// 1-based dense block that receives the extra strided pooling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_block: Option<usize>,
    /// Number of units placed before the pooling inside the split block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_unit_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilations: Option<Vec<usize>>,
    #[serde(default = "default_width")]
    pub upsample_width: usize,
    #[serde(default = "default_true")]
    pub use_spp: bool,
    #[serde(default)]
    pub dws_upsampling: bool,
    #[serde(default = "default_true")]
    pub aux_heads: bool,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

/// A strided pooling inserted inside a dense block (0-based block index).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Split {
    pub block: usize,
    pub after_unit: usize,
}

impl ArchSpec {
    pub fn new(backbone: Backbone) -> Self {
        ArchSpec {
            backbone,
            stem_width: None,
            downsample_factor: 32,
            output_stride: 4,
            split_block: None,
            split_unit_index: None,
            dilations: None,
            upsample_width: 128,
            use_spp: true,
            dws_upsampling: false,
            aux_heads: true,
            num_classes: 19,
        }
    }

    /// The small configuration used for desk-scale training.
    pub fn toy() -> Self {
        ArchSpec {
            downsample_factor: 64,
            upsample_width: 32,
            num_classes: 5,
            ..ArchSpec::new(Backbone::Toy {
                n: vec![2, 3, 4, 3],
                k: 8,
            })
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: ArchSpec = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn stem(&self) -> usize {
        self.stem_width
            .unwrap_or_else(|| self.backbone.default_stem_width())
    }

    pub fn units(&self) -> Vec<usize> {
        self.backbone.units()
    }

    pub fn dilation_list(&self) -> Vec<usize> {
        self.dilations
            .clone()
            .unwrap_or_else(|| vec![1; self.units().len()])
    }

    /// Whether the transition after block `b` pools (it does not when the
    /// next block switches to a larger dilation).
    pub fn transition_pools(&self, b: usize) -> bool {
        let d = self.dilation_list();
        d[b + 1] <= d[b]
    }

    /// Extra pooling splits implied by the downsampling factor.
    pub fn splits(&self) -> Result<Vec<Split>> {
        let units = self.units();
        let nb = units.len();
        let base = self.base_factor();
        let extra = match self.downsample_factor.checked_div(base) {
            Some(r) if r * base == self.downsample_factor && r.is_power_of_two() => {
                r.trailing_zeros() as usize
            }
            _ => {
                return Err(Error::Spec(format!(
                    "downsample factor {} is not reachable: the pooling layout gives {}",
                    self.downsample_factor, base
                )))
            }
        };
        if extra > 2 {
            return Err(Error::Spec(format!(
                "downsample factor {} needs {} splits; at most two are supported",
                self.downsample_factor, extra
            )));
        }
        if extra > 0 && !self.backbone.is_dense() {
            return Err(Error::Spec(
                "residual backbones do not support split blocks".into(),
            ));
        }
        let first_block = self.split_block.unwrap_or(nb.min(3));
        if first_block == 0 || first_block > nb {
            return Err(Error::Spec(format!(
                "split_block {} outside 1..={}",
                first_block, nb
            )));
        }
        let mut out = Vec::new();
        if extra >= 1 {
            let b = first_block - 1;
            let at = self.split_unit_index.unwrap_or(units[b] / 2);
            out.push(Split {
                block: b,
                after_unit: at,
            });
        } else if self.split_block.is_some() || self.split_unit_index.is_some() {
            return Err(Error::Spec(format!(
                "split requested but downsample factor {} needs no extra pooling",
                self.downsample_factor
            )));
        }
        if extra == 2 {
            let b = nb - 1;
            if out[0].block == b {
                return Err(Error::Spec("two splits cannot share the last block".into()));
            }
            out.push(Split {
                block: b,
                after_unit: units[b] / 2,
            });
        }
        for s in &out {
            if s.after_unit == 0 || s.after_unit >= units[s.block] {
                return Err(Error::Spec(format!(
                    "split index {} outside 1..={} for block {}",
                    s.after_unit,
                    units[s.block].saturating_sub(1),
                    s.block + 1
                )));
            }
        }
        Ok(out)
    }

    /// Downsampling from the stem and the pooling transitions alone.
    pub fn base_factor(&self) -> usize {
        let nb = self.units().len();
        let mut f = 4;
        for b in 0..nb.saturating_sub(1) {
            if self.transition_pools(b) {
                f *= 2;
            }
        }
        f
    }

    /// Number of transition-up blocks.
    pub fn num_tus(&self) -> usize {
        (self.downsample_factor / self.output_stride).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let units = self.units();
        if units.is_empty() || units.contains(&0) {
            return Err(Error::Spec(format!(
                "every block needs at least one unit, got {:?}",
                units
            )));
        }
        if let Family::Dense { k } = self.backbone.family() {
            if k == 0 {
                return Err(Error::Spec("growth rate must be positive".into()));
            }
        }
        if self.stem() == 0 || self.upsample_width == 0 {
            return Err(Error::Spec(
                "stem and upsampling widths must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Spec("at least two classes are required".into()));
        }
        let dil = self.dilation_list();
        if dil.len() != units.len() || dil.contains(&0) {
            return Err(Error::Spec(format!(
                "dilations {:?} must list one positive rate per block",
                dil
            )));
        }
        if dil.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Spec(
                "dilations must not decrease along the network".into(),
            ));
        }
        if !self.backbone.is_dense() && dil.iter().any(|&d| d != 1) {
            return Err(Error::Spec(
                "residual backbones are built without dilation".into(),
            ));
        }
        self.splits()?;
        let (d, u) = (self.downsample_factor, self.output_stride);
        let ladder_ok = (u == 2 || u == 4) && u < d;
        if !(ladder_ok || u == d) || !(d / u).is_power_of_two() {
            return Err(Error::Spec(format!(
                "output stride {} must be 2 or 4 (below downsample factor {}) or equal to it",
                u, d
            )));
        }
        if self.use_spp && self.feature_channels() % 8 != 0 {
            return Err(Error::Spec(format!(
                "pyramid pooling needs feature channels divisible by 8, got {}",
                self.feature_channels()
            )));
        }
        if !self.use_spp && self.feature_channels() % 4 != 0 {
            return Err(Error::Spec(format!(
                "feature channels {} must be divisible by 4",
                self.feature_channels()
            )));
        }
        Ok(())
    }

    /// Channels entering each block and leaving the last one.
    pub fn block_channels(&self) -> Vec<(usize, usize)> {
        let units = self.units();
        let mut out = Vec::new();
        match self.backbone.family() {
            Family::Dense { k } => {
                let mut c = self.stem();
                for (b, &n) in units.iter().enumerate() {
                    let f_out = c + n * k;
                    out.push((c, f_out));
                    c = if b + 1 < units.len() {
                        f_out / 2
                    } else {
                        f_out
                    };
                }
            }
            Family::Bottleneck | Family::Basic => {
                let widths: Vec<usize> = match self.backbone.family() {
                    Family::Bottleneck => (0..units.len()).map(|b| 256 << b).collect(),
                    _ => (0..units.len()).map(|b| 64 << b).collect(),
                };
                let mut c = self.stem();
                for w in widths {
                    out.push((c, w));
                    c = w;
                }
            }
        }
        out
    }

    /// Channels of the deepest feature tensor (the pyramid pooling input).
    pub fn feature_channels(&self) -> usize {
        self.block_channels().last().map(|c| c.1).unwrap_or(0)
    }
}
