//! Graph execution: plain forward passes, traced forward passes, and
//! checkpointed backward passes.

use std::time::Instant;

use super::graph::{Graph, Node, NodeId, Op, ParamId};
use super::memory::{MemoryReport, MemoryTracker};
use super::params::ParamStore;
use super::policy::{plan, CheckpointPolicy, Plan};
use crate::error::{shape_err, Error, Result};
use crate::kernels::conv::{conv2d, conv2d_backward};
use crate::kernels::elementwise::{
    add, add_assign, concat_channels, relu, relu_backward, split_channels,
};
use crate::kernels::norm::{
    batch_norm, batch_norm_backward, normalize, BnMode, BN_EPSILON, BN_MOMENTUM,
};
use crate::kernels::pool::{
    avg_pool_backward, grid_avg_pool_backward, grid_avg_pool_cells, pool, pool_backward, PoolKind,
};
use crate::kernels::resize::{bilinear_resize, bilinear_resize_backward};
use crate::tensor::Tensor;

type Stats = (Vec<f64>, Vec<f64>);

/// Ops without parameters or statistics.
fn eval_plain(node: &Node, ins: &[&Tensor<f32>], store: &ParamStore) -> Result<Tensor<f32>> {
    match &node.op {
        Op::Conv { weight, params } => conv2d(ins[0], store.get(*weight), params),
        Op::Relu => Ok(relu(ins[0])),
        Op::Add => add(ins[0], ins[1]),
        Op::Concat => concat_channels(ins),
        Op::Pool(p) => pool(ins[0], p),
        Op::GridPool { rows, cols } => grid_avg_pool_cells(ins[0], *rows, *cols),
        Op::Resize { h, w } => bilinear_resize(ins[0], *h, *w),
        Op::Input | Op::BatchNorm { .. } => unreachable!("handled by the caller"),
    }
}

fn eval_node(
    node: &Node,
    ins: &[&Tensor<f32>],
    store: &mut ParamStore,
    mode: BnMode,
) -> Result<(Tensor<f32>, Option<Stats>)> {
    match &node.op {
        Op::BatchNorm { gamma, beta, slot } => {
            let (g, b) = (&store.values[gamma.0], &store.values[beta.0]);
            let running = &mut store.bn[*slot];
            let (y, m, v) = batch_norm(ins[0], g, b, running, mode, BN_MOMENTUM, BN_EPSILON)
                .map_err(|e| match e {
                    Error::UninitializedStats(_) => Error::UninitializedStats(*slot),
                    e => e,
                })?;
            Ok((y, Some((m, v))))
        }
        _ => Ok((eval_plain(node, ins, store)?, None)),
    }
}

/// Re-executes a node with the batch statistics captured in the first pass.
fn replay_node(
    node: &Node,
    ins: &[&Tensor<f32>],
    store: &ParamStore,
    stats: Option<&Stats>,
) -> Result<Tensor<f32>> {
    match &node.op {
        Op::BatchNorm { gamma, beta, .. } => {
            let (m, v) = stats.ok_or_else(|| {
                Error::InvalidArgument(format!("no captured statistics for `{}`", node.name))
            })?;
            normalize(
                ins[0],
                store.get(*gamma),
                store.get(*beta),
                m,
                v,
                BN_EPSILON,
            )
        }
        _ => eval_plain(node, ins, store),
    }
}

type NodeGrads = (Vec<Option<Tensor<f32>>>, Vec<(ParamId, Tensor<f32>)>);

fn backward_node(
    node: &Node,
    graph: &Graph,
    ins: &[Option<&Tensor<f32>>],
    out: Option<&Tensor<f32>>,
    dy: Tensor<f32>,
    store: &ParamStore,
    stats: Option<&Stats>,
    need: &[bool],
) -> Result<NodeGrads> {
    let missing = || {
        Error::InvalidArgument(format!(
            "value needed by the backward of `{}` is not live",
            node.name
        ))
    };
    let in_shape = |k: usize| graph.nodes[node.inputs[k].0].shape.as_slice();
    match &node.op {
        Op::Input => Ok((vec![], vec![])),
        Op::Conv { weight, params } => {
            let x = ins[0].ok_or_else(missing)?;
            let (dx, dw) = conv2d_backward(x, store.get(*weight), params, &dy, need[0])?;
            Ok((vec![dx], vec![(*weight, dw)]))
        }
        Op::BatchNorm { gamma, beta, .. } => {
            let x = ins[0].ok_or_else(missing)?;
            let (m, v) = stats.ok_or_else(missing)?;
            let (dx, dg, db) =
                batch_norm_backward(x, store.get(*gamma), m, v, BN_EPSILON, &dy, true)?;
            Ok((vec![Some(dx)], vec![(*gamma, dg), (*beta, db)]))
        }
        Op::Relu => Ok((
            vec![Some(relu_backward(out.ok_or_else(missing)?, &dy)?)],
            vec![],
        )),
        Op::Add => {
            let other = dy.clone();
            Ok((vec![Some(dy), Some(other)], vec![]))
        }
        Op::Concat => {
            let widths: Vec<usize> = (0..node.inputs.len()).map(|k| in_shape(k)[1]).collect();
            Ok((
                split_channels(&dy, &widths)?
                    .into_iter()
                    .map(Some)
                    .collect(),
                vec![],
            ))
        }
        Op::Pool(p) => {
            let dx = if p.kind == PoolKind::Max {
                pool_backward(ins[0].ok_or_else(missing)?, p, &dy)?
            } else {
                avg_pool_backward(in_shape(0), p, &dy)?
            };
            Ok((vec![Some(dx)], vec![]))
        }
        Op::GridPool { rows, cols } => Ok((
            vec![Some(grid_avg_pool_backward(
                in_shape(0),
                *rows,
                *cols,
                &dy,
            )?)],
            vec![],
        )),
        Op::Resize { .. } => Ok((
            vec![Some(bilinear_resize_backward(in_shape(0), &dy)?)],
            vec![],
        )),
    }
}

fn check_input(graph: &Graph, input: &Tensor<f32>) -> Result<()> {
    if input.shape() != graph.input_shape() {
        return Err(shape_err!(
            "input {:?} does not match the graph input {:?}",
            input.shape(),
            graph.input_shape()
        ));
    }
    Ok(())
}

/// Last forward consumer of every node (the node itself when unused).
fn last_forward_use(graph: &Graph) -> Vec<usize> {
    let mut last: Vec<usize> = (0..graph.len()).collect();
    for (i, n) in graph.nodes.iter().enumerate() {
        for u in &n.inputs {
            last[u.0] = last[u.0].max(i);
        }
    }
    last
}

struct ForwardState {
    values: Vec<Option<Tensor<f32>>>,
    stats: Vec<Option<Stats>>,
}

/// Runs every node in order, keeping values flagged in `keep` and freeing the
/// rest after their last consumer.
fn run_forward(
    graph: &Graph,
    store: &mut ParamStore,
    input: Tensor<f32>,
    mode: BnMode,
    keep: &[bool],
    tracker: &mut MemoryTracker,
) -> Result<ForwardState> {
    check_input(graph, &input)?;
    store.check_layout(graph)?;
    let n = graph.len();
    let last = last_forward_use(graph);
    let mut values: Vec<Option<Tensor<f32>>> = vec![None; n];
    let mut stats: Vec<Option<Stats>> = vec![None; n];
    tracker.alloc(input.byte_size());
    values[0] = Some(input);
    for i in 1..n {
        let node = &graph.nodes[i];
        let (y, s) = {
            let ins: Vec<&Tensor<f32>> = node
                .inputs
                .iter()
                .map(|u| values[u.0].as_ref().expect("forward inputs are live"))
                .collect();
            eval_node(node, &ins, store, mode)?
        };
        debug_assert_eq!(y.shape(), node.shape.as_slice(), "{}", node.name);
        tracker.alloc(y.byte_size());
        values[i] = Some(y);
        if mode == BnMode::Train {
            stats[i] = s;
        }
        for u in node.inputs.iter().map(|u| u.0).chain(std::iter::once(i)) {
            if last[u] == i && !keep[u] {
                if let Some(t) = values[u].take() {
                    tracker.free(t.byte_size());
                }
            }
        }
    }
    Ok(ForwardState { values, stats })
}

fn collect_outputs(graph: &Graph, values: &[Option<Tensor<f32>>]) -> Vec<Tensor<f32>> {
    graph
        .outputs
        .iter()
        .map(|o| values[o.node.0].clone().expect("outputs are kept"))
        .collect()
}

/// Forward pass without a trace. Batch norm runs in `mode`; intermediate
/// values are released as soon as possible.
pub fn forward(
    graph: &Graph,
    store: &mut ParamStore,
    input: Tensor<f32>,
    mode: BnMode,
) -> Result<Vec<Tensor<f32>>> {
    let keep: Vec<bool> = (0..graph.len())
        .map(|i| graph.is_output(NodeId(i)))
        .collect();
    let mut tracker = MemoryTracker::default();
    let st = run_forward(graph, store, input, mode, &keep, &mut tracker)?;
    Ok(collect_outputs(graph, &st.values))
}

/// A recorded training-mode forward pass awaiting its backward pass.
pub struct Trace<'g> {
    graph: &'g Graph,
    policy: CheckpointPolicy,
    plan: Plan,
    values: Vec<Option<Tensor<f32>>>,
    stats: Vec<Option<Stats>>,
    tracker: MemoryTracker,
    retained: usize,
    recomputes: usize,
    consumed: bool,
    t_forward: f64,
    t_backward: f64,
}

/// Training-mode forward pass that keeps exactly the values `policy` caches.
pub fn trace_forward<'g>(
    graph: &'g Graph,
    store: &mut ParamStore,
    input: Tensor<f32>,
    policy: &CheckpointPolicy,
) -> Result<(Vec<Tensor<f32>>, Trace<'g>)> {
    let start = Instant::now();
    let plan = plan(graph, policy)?;
    let mut tracker = MemoryTracker::default();
    let st = run_forward(
        graph,
        store,
        input,
        BnMode::Train,
        &plan.cached,
        &mut tracker,
    )?;
    let outputs = collect_outputs(graph, &st.values);
    let retained = tracker.live();
    let trace = Trace {
        graph,
        policy: policy.clone(),
        plan,
        values: st.values,
        stats: st.stats,
        tracker,
        retained,
        recomputes: 0,
        consumed: false,
        t_forward: start.elapsed().as_secs_f64(),
        t_backward: 0.0,
    };
    Ok((outputs, trace))
}

impl Trace<'_> {
    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    /// Nodes whose values are currently held.
    pub fn live_nodes(&self) -> Vec<usize> {
        (0..self.values.len())
            .filter(|&i| self.values[i].is_some())
            .collect()
    }

    pub fn live_bytes(&self) -> usize {
        self.tracker.live()
    }

    fn recompute(&mut self, segment: usize, store: &ParamStore) -> Result<()> {
        let graph = self.graph;
        let list = self.plan.segments[segment].recompute.clone();
        for j in list {
            let node = &graph.nodes[j];
            let y = {
                let ins: Vec<&Tensor<f32>> = node
                    .inputs
                    .iter()
                    .map(|u| {
                        self.values[u.0].as_ref().ok_or_else(|| {
                            Error::InvalidArgument(format!(
                                "checkpoint input of `{}` is not live",
                                node.name
                            ))
                        })
                    })
                    .collect::<Result<_>>()?;
                replay_node(node, &ins, store, self.stats[j].as_ref())?
            };
            self.tracker.alloc_recompute(segment, y.byte_size());
            self.values[j] = Some(y);
            self.recomputes += 1;
        }
        Ok(())
    }

    fn release(&mut self, i: usize) {
        if let Some(t) = self.values[i].take() {
            match self.plan.segment_of[i] {
                Some(s) if !self.plan.cached[i] => self.tracker.free_recompute(s, t.byte_size()),
                _ => self.tracker.free(t.byte_size()),
            }
        }
    }

    /// Reverse-mode pass seeded with gradients of the graph outputs (in the
    /// order of `Graph::outputs`; `None` means zero). Returns one gradient
    /// per parameter. A trace supports a single backward pass.
    pub fn backward(
        &mut self,
        store: &ParamStore,
        output_grads: Vec<Option<Tensor<f32>>>,
    ) -> Result<Vec<Option<Tensor<f32>>>> {
        if self.consumed {
            return Err(Error::TraceConsumed);
        }
        self.consumed = true;
        let start = Instant::now();
        let graph = self.graph;
        let n = graph.len();
        if output_grads.len() != graph.outputs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} output gradients for {} outputs",
                output_grads.len(),
                graph.outputs.len()
            )));
        }
        self.tracker.begin_backward();
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; n];
        let mut pgrads: Vec<Option<Tensor<f32>>> = vec![None; graph.params.len()];
        for (o, g) in graph.outputs.iter().zip(output_grads) {
            let Some(g) = g else { continue };
            if g.shape() != graph.nodes[o.node.0].shape.as_slice() {
                return Err(shape_err!(
                    "gradient {:?} for output `{}`",
                    g.shape(),
                    o.label
                ));
            }
            self.tracker.alloc(g.byte_size());
            accumulate(&mut grads[o.node.0], g, &mut self.tracker)?;
        }
        let mut seg_end: Vec<Option<usize>> = vec![None; n];
        let mut seg_start: Vec<Option<usize>> = vec![None; n];
        for (s, seg) in self.plan.segments.iter().enumerate() {
            seg_end[seg.last] = Some(s);
            seg_start[seg.first] = Some(s);
        }

        for i in (1..n).rev() {
            if let Some(s) = seg_end[i] {
                self.recompute(s, store)?;
            }
            let node = &graph.nodes[i];
            if let Some(dy) = grads[i].take() {
                let dy_bytes = dy.byte_size();
                let need: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|u| !matches!(graph.nodes[u.0].op, Op::Input))
                    .collect();
                let (dins, dparams) = {
                    let ins: Vec<Option<&Tensor<f32>>> = node
                        .inputs
                        .iter()
                        .map(|u| self.values[u.0].as_ref())
                        .collect();
                    backward_node(
                        node,
                        graph,
                        &ins,
                        self.values[i].as_ref(),
                        dy,
                        store,
                        self.stats[i].as_ref(),
                        &need,
                    )?
                };
                for d in dins.iter().flatten() {
                    self.tracker.alloc(d.byte_size());
                }
                self.tracker.free(dy_bytes);
                for (k, d) in dins.into_iter().enumerate() {
                    let Some(d) = d else { continue };
                    if need[k] {
                        accumulate(&mut grads[node.inputs[k].0], d, &mut self.tracker)?;
                    } else {
                        self.tracker.free(d.byte_size());
                    }
                }
                for (p, g) in dparams {
                    match &mut pgrads[p.0] {
                        Some(acc) => add_assign(acc, &g)?,
                        slot => *slot = Some(g),
                    }
                }
            }
            self.release(i);
            if let Some(s) = seg_start[i] {
                debug_assert_eq!(
                    self.tracker.segment_bytes(s),
                    0,
                    "segment cache outlived its segment"
                );
            }
        }
        if let Some(g) = grads[0].take() {
            self.tracker.free(g.byte_size());
        }
        self.release(0);
        self.t_backward = start.elapsed().as_secs_f64();
        Ok(pgrads)
    }

    pub fn report(&self, param_bytes: usize) -> MemoryReport {
        let pf = self.tracker.peak_forward();
        let pb = if self.consumed {
            self.tracker.peak_backward()
        } else {
            0
        };
        MemoryReport {
            policy: self.policy.name(),
            batch: self.graph.input_shape()[0],
            peak_forward_bytes: pf,
            peak_backward_bytes: pb,
            peak_total_bytes: pf.max(pb),
            retained_bytes: self.retained,
            param_bytes,
            recompute_kernel_invocations: self.recomputes,
            max_concurrent_segment_caches: self.tracker.max_concurrent_segments(),
            wall_time_forward: self.t_forward,
            wall_time_total: self.t_forward + self.t_backward,
        }
    }
}

fn accumulate(
    slot: &mut Option<Tensor<f32>>,
    g: Tensor<f32>,
    tracker: &mut MemoryTracker,
) -> Result<()> {
    match slot {
        Some(acc) => {
            add_assign(acc, &g)?;
            tracker.free(g.byte_size());
        }
        None => *slot = Some(g),
    }
    Ok(())
}

/// One traced training step seeded with unit-mean gradients on every output;
/// used to measure memory and time independently of any loss.
pub fn measure_peak(
    graph: &Graph,
    store: &mut ParamStore,
    input: Tensor<f32>,
    policy: &CheckpointPolicy,
) -> Result<MemoryReport> {
    let (outs, mut trace) = trace_forward(graph, store, input, policy)?;
    let seeds = outs
        .iter()
        .map(|o| Some(Tensor::full(o.shape(), 1.0 / o.len() as f32)))
        .collect();
    drop(outs);
    trace.backward(store, seeds)?;
    Ok(trace.report(store.bytes()))
}
