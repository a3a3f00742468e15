//! Gradient agreement between checkpoint policies.

use super::exec::trace_forward;
use super::graph::Graph;
use super::params::ParamStore;
use super::policy::CheckpointPolicy;
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDiff {
    pub policy: CheckpointPolicy,
    /// Largest |g - g_baseline| over every parameter gradient.
    pub max_abs_diff: f64,
    /// `max_abs_diff` divided by the largest baseline gradient magnitude.
    pub max_rel_diff: f64,
    pub recomputes: usize,
}

/// Parameter gradients of one traced step from a copy of `store`, seeded
/// with pseudo-random output gradients drawn from `seed`.
pub fn policy_gradients(
    graph: &Graph,
    store: &ParamStore,
    input: &Tensor<f32>,
    policy: &CheckpointPolicy,
    seed: u64,
) -> Result<(Vec<Option<Tensor<f32>>>, usize)> {
    let mut store = store.clone();
    let (outs, mut trace) = trace_forward(graph, &mut store, input.clone(), policy)?;
    let mut rng = SplitMix64::new(seed);
    let seeds = outs
        .iter()
        .map(|o| {
            Some(Tensor::from_fn(o.shape(), |_| {
                rng.uniform(-1.0, 1.0) as f32 / o.len() as f32
            }))
        })
        .collect();
    drop(outs);
    let grads = trace.backward(&store, seeds)?;
    let recomputes = trace.report(store.bytes()).recompute_kernel_invocations;
    Ok((grads, recomputes))
}

/// Compares every policy's gradients against `CheckpointPolicy::None`.
pub fn compare_policies(
    graph: &Graph,
    store: &ParamStore,
    input: &Tensor<f32>,
    policies: &[CheckpointPolicy],
    seed: u64,
) -> Result<Vec<PolicyDiff>> {
    let (base, _) = policy_gradients(graph, store, input, &CheckpointPolicy::None, seed)?;
    let scale = base
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs() as f64));
    policies
        .iter()
        .map(|p| {
            let (grads, recomputes) = policy_gradients(graph, store, input, p, seed)?;
            let mut max_abs = 0.0f64;
            for (a, b) in grads.iter().zip(&base) {
                match (a, b) {
                    (Some(a), Some(b)) => {
                        for (x, y) in a.data().iter().zip(b.data()) {
                            let d = (*x as f64 - *y as f64).abs();
                            // NaN must not read as agreement
                            max_abs = if d.is_nan() {
                                f64::INFINITY
                            } else {
                                max_abs.max(d)
                            };
                        }
                    }
                    (None, None) => {}
                    _ => max_abs = f64::INFINITY,
                }
            }
            let rel = if scale > 0.0 {
                max_abs / scale
            } else {
                max_abs
            };
            Ok(PolicyDiff {
                policy: p.clone(),
                max_abs_diff: max_abs,
                max_rel_diff: rel,
                recomputes,
            })
        })
        .collect()
}
