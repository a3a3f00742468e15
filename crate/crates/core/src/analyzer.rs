//! Static cost model: convolution weights, multiply-accumulates, and
//! activation caches, all derived from the graph shapes without running it.

use std::fmt::Write as _;

use crate::autograd::graph::{Graph, Op, Stage};
use crate::autograd::policy::{plan, CheckpointPolicy};
use crate::error::{arg_err, Result};
use crate::nets::ladder::build;
use crate::nets::spec::{ArchSpec, Family};
use crate::tensor::DType;

/// Per-pixel activations cached by a residual block of `n` units: every unit
/// stores its `f_out`-wide input, plus the block output.
pub fn cache_resnet(n: usize, f_out: usize) -> Result<u64> {
    if n == 0 || f_out == 0 {
        return Err(arg_err!(
            "cache_resnet needs positive arguments, got n={} f_out={}",
            n,
            f_out
        ));
    }
    Ok(((n + 1) * f_out) as u64)
}

/// Per-pixel activations cached by a dense block when each unit's
/// concatenation is recomputed rather than stored.
pub fn cache_densenet(f_in: usize, n: usize, k: usize) -> Result<u64> {
    if f_in == 0 || n == 0 || k == 0 {
        return Err(arg_err!(
            "cache_densenet needs positive arguments, got f_in={} n={} k={}",
            f_in,
            n,
            k
        ));
    }
    Ok((f_in + (n - 1) * k) as u64)
}

/// Per-pixel activations of a naive dense block that materializes a fresh
/// concatenation for every unit.
pub fn duplicate_cat_cache(f_in: usize, n: usize, k: usize) -> u64 {
    (0..n).map(|i| (f_in + i * k) as u64).sum()
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Report row label of a stage. Transitions count with their preceding block.
pub fn group_label(stage: Stage) -> String {
    match stage {
        Stage::Input => "input".into(),
        Stage::Stem => "stem".into(),
        Stage::Block(b) | Stage::Transition(b) => format!("block{}", b + 1),
        Stage::Spp => "spp".into(),
        Stage::Up(_) => "up".into(),
        Stage::Head(_) => "heads".into(),
        Stage::Other => "other".into(),
    }
}

fn row_order(label: &str) -> (usize, usize) {
    match label {
        "stem" => (0, 0),
        "spp" => (2, 0),
        "up" => (3, 0),
        "heads" => (4, 0),
        l if l.starts_with("block") => (1, l[5..].parse().unwrap_or(0)),
        _ => (5, 0),
    }
}

/// Sums a per-conv quantity by report group.
fn conv_sums(
    graph: &Graph,
    f: impl Fn(&crate::kernels::conv::ConvParams, &[usize]) -> u64,
) -> Vec<(String, u64)> {
    let mut out: Vec<(String, u64)> = Vec::new();
    for node in &graph.nodes {
        if let Op::Conv { params, .. } = &node.op {
            let label = group_label(node.tag.stage);
            let v = f(params, &node.shape);
            match out.iter_mut().find(|(l, _)| *l == label) {
                Some(e) => e.1 += v,
                None => out.push((label, v)),
            }
        }
    }
    out.sort_by_key(|(l, _)| row_order(l));
    out
}

/// Convolution weights per group; transitions are counted with the block
/// before them and projection shortcuts with their block. BN parameters are
/// excluded.
pub fn count_params(spec: &ArchSpec) -> Result<Vec<(String, u64)>> {
    let d = spec.downsample_factor;
    let g = build(spec, 1, d, d)?;
    Ok(conv_sums(&g.graph, |p, _| p.weight_count() as u64))
}

/// Convolution multiply-accumulates per group for one `h`×`w` image. BN,
/// ReLU, pooling and resizing are not counted.
pub fn count_macs(spec: &ArchSpec, h: usize, w: usize) -> Result<Vec<(String, u64)>> {
    let g = build(spec, 1, h, w)?;
    Ok(conv_sums(&g.graph, |p, s| p.macs(s[2], s[3])))
}

pub fn total(rows: &[(String, u64)]) -> u64 {
    rows.iter().map(|r| r.1).sum()
}

/// Analytic training-memory estimate for `policy`: bytes of every cached
/// tensor plus the largest recomputation of a single segment. Gradients are
/// not modelled, so this tracks the forward-retained part of the peak.
pub fn simulate_policy_cache(
    spec: &ArchSpec,
    policy: &CheckpointPolicy,
    h: usize,
    w: usize,
    batch: usize,
    dtype: DType,
) -> Result<u64> {
    let g = build(spec, batch, h, w)?;
    let p = plan(&g.graph, policy)?;
    let f32_bytes = (p.cached_bytes(&g.graph) + p.max_recompute_bytes(&g.graph)) as u64;
    Ok(f32_bytes / 4 * dtype.width() as u64)
}

/// Receptive field of a block's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReceptiveField {
    /// Extent in input pixels, counting every window (convolutions and pools).
    pub size: usize,
    /// Extent when pooling layers are treated as pure subsampling, i.e. only
    /// convolution kernels widen the field.
    pub conv_size: usize,
    /// Distance in input pixels between adjacent output positions.
    pub jump: usize,
}

/// Receptive field at the output of every backbone block.
pub fn receptive_fields(spec: &ArchSpec) -> Result<Vec<ReceptiveField>> {
    let d = spec.downsample_factor;
    let g = build(spec, 1, d, d)?.graph;
    let mut rf = vec![
        ReceptiveField {
            size: 1,
            conv_size: 1,
            jump: 1
        };
        g.len()
    ];
    let mut out = vec![None; spec.units().len()];
    for (i, node) in g.nodes.iter().enumerate() {
        if !matches!(
            node.tag.stage,
            Stage::Stem | Stage::Block(_) | Stage::Transition(_)
        ) {
            continue;
        }
        let inp = node
            .inputs
            .iter()
            .map(|&j| rf[j.0])
            .reduce(|a, b| ReceptiveField {
                size: a.size.max(b.size),
                conv_size: a.conv_size.max(b.conv_size),
                jump: a.jump.max(b.jump),
            })
            .unwrap_or(ReceptiveField {
                size: 1,
                conv_size: 1,
                jump: 1,
            });
        rf[i] = match &node.op {
            Op::Conv { params, .. } => {
                let span = params.dilation * (params.kernel_h - 1);
                ReceptiveField {
                    size: inp.size + span * inp.jump,
                    conv_size: inp.conv_size + span * inp.jump,
                    jump: inp.jump * params.stride,
                }
            }
            Op::Pool(p) => ReceptiveField {
                size: inp.size + (p.window - 1) * inp.jump,
                conv_size: inp.conv_size,
                jump: inp.jump * p.stride,
            },
            _ => inp,
        };
        if let Stage::Block(b) = node.tag.stage {
            out[b] = Some(rf[i]);
        }
    }
    Ok(out
        .into_iter()
        .map(|r| r.expect("every block records nodes"))
        .collect())
}

/// Per-pixel backprop cache of each backbone block.
pub fn block_caches(spec: &ArchSpec) -> Result<Vec<u64>> {
    let units = spec.units();
    let channels = spec.block_channels();
    units
        .iter()
        .zip(&channels)
        .map(|(&n, &(f_in, f_out))| match spec.backbone.family() {
            Family::Dense { k } => cache_densenet(f_in, n, k),
            _ => cache_resnet(n, f_out),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub block: String,
    pub params: u64,
    pub macs: u64,
    pub cache_per_pixel: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_macs: u64,
    /// Analytic bytes per checkpoint policy for one image at `height`×`width`.
    pub policy_cache_bytes: Vec<(String, u64)>,
}

pub const CONVENTIONS: &str = "params: convolution weights only, each transition counted with the block before it, \
projection shortcuts counted; macs: convolution multiply-accumulates only (no BN, ReLU, pooling or resizing)";

impl CostReport {
    pub fn new(spec: &ArchSpec, h: usize, w: usize) -> Result<Self> {
        let params = count_params(spec)?;
        let macs = count_macs(spec, h, w)?;
        let caches = block_caches(spec)?;
        let rows: Vec<CostRow> = params
            .iter()
            .map(|(label, p)| {
                let m = macs
                    .iter()
                    .find(|(l, _)| l == label)
                    .map(|r| r.1)
                    .unwrap_or(0);
                let cache = label
                    .strip_prefix("block")
                    .and_then(|b| b.parse::<usize>().ok())
                    .and_then(|b| caches.get(b - 1).copied());
                CostRow {
                    block: label.clone(),
                    params: *p,
                    macs: m,
                    cache_per_pixel: cache,
                }
            })
            .collect();
        let mut policy_cache_bytes = Vec::new();
        for p in CheckpointPolicy::TABLE.iter() {
            policy_cache_bytes.push((
                p.name(),
                simulate_policy_cache(spec, p, h, w, 1, DType::F32)?,
            ));
        }
        Ok(CostReport {
            height: h,
            width: w,
            total_params: rows.iter().map(|r| r.params).sum(),
            total_macs: rows.iter().map(|r| r.macs).sum(),
            rows,
            policy_cache_bytes,
        })
    }

    pub const CSV_HEADER: &'static str = "block,params_M,macs_G,cache_per_pixel";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let cache = r.cache_per_pixel.map(|c| c.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{:.1},{:.2},{}",
                r.block,
                r.params as f64 / 1e6,
                r.macs as f64 / 1e9,
                cache
            );
        }
        let _ = writeln!(
            s,
            "total,{:.1},{:.2},",
            self.total_params as f64 / 1e6,
            self.total_macs as f64 / 1e9
        );
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", CONVENTIONS);
        let _ = writeln!(s, "# input {}x{}", self.height, self.width);
        let _ = writeln!(
            s,
            "{:<8} {:>12} {:>9} {:>10} {:>16}",
            "block", "params", "params_M", "macs_G", "cache_per_pixel"
        );
        for r in &self.rows {
            let cache = r
                .cache_per_pixel
                .map(|c| c.to_string())
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<8} {:>12} {:>9.1} {:>10.2} {:>16}",
                r.block,
                r.params,
                r.params as f64 / 1e6,
                r.macs as f64 / 1e9,
                cache
            );
        }
        let _ = writeln!(
            s,
            "{:<8} {:>12} {:>9.1} {:>10.2} {:>16}",
            "total",
            self.total_params,
            self.total_params as f64 / 1e6,
            self.total_macs as f64 / 1e9,
            "-"
        );
        let _ = writeln!(s, "\npolicy cache (batch 1, f32, analytic):");
        for (name, b) in &self.policy_cache_bytes {
            let _ = writeln!(
                s,
                "  {:<28} {:>10.1} MB",
                name,
                *b as f64 / (1024.0 * 1024.0)
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::spec::Backbone;

    #[test]
    fn cache_formulas() {
        assert_eq!(cache_resnet(3, 256).unwrap(), 1024);
        assert_eq!(cache_densenet(64, 6, 32).unwrap(), 224);
        assert!(cache_densenet(0, 6, 32).is_err());
        assert!(cache_resnet(0, 1).is_err());
    }

    #[test]
    fn exponent_fit_recovers_powers() {
        let xs: Vec<f64> = (1..10).map(|v| v as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(1.5)).collect();
        assert!((fit_exponent(&xs, &ys) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn single_conv_macs() {
        let p = crate::kernels::conv::ConvParams::square(64, 64, 3, 1, 1);
        assert_eq!(p.macs(32, 32), 37_748_736);
    }

    #[test]
    fn totals_are_sums_and_resolution_linear() {
        let mut s = ArchSpec::new(Backbone::Dn121);
        let a = CostReport::new(&s, 512, 512).unwrap();
        let b = CostReport::new(&s, 1024, 1024).unwrap();
        assert_eq!(a.total_params, b.total_params);
        assert_eq!(a.total_macs, a.rows.iter().map(|r| r.macs).sum::<u64>());
        // pooled pyramid branches run on fixed-size grids
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            if ra.block != "spp" && ra.block != "heads" {
                assert_eq!(ra.macs * 4, rb.macs, "{}", ra.block);
            }
        }
        s.use_spp = false;
        let lo = total(&count_macs(&s, 512, 512).unwrap());
        let hi = total(&count_macs(&s, 1024, 1024).unwrap());
        assert_eq!(lo * 4, hi);
        assert!(a.to_csv().starts_with(CostReport::CSV_HEADER));
    }
}
