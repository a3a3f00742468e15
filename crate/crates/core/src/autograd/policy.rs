//! Checkpoint policies and the caching plan they induce on a graph.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Part, Stage};
use crate::error::{Error, Result};

/// Which node outputs survive the forward pass.
///
/// Each policy is a list of part groups. Nodes whose part belongs to a group
/// are discarded after the forward pass (unless something outside their
/// segment reads them) and recomputed segment by segment during backward.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    #[default]
    None,
    Conv3x3Only,
    CatProj,
    CatProjAnd3x3,
    BlockStemTdUp,
    UnitWhole,
    UnitWholePlusStemTdUp,
    Custom(Vec<Vec<Part>>),
}

impl CheckpointPolicy {
    /// The seven strategies in memory-benchmark row order.
    pub const TABLE: [CheckpointPolicy; 7] = [
        CheckpointPolicy::None,
        CheckpointPolicy::Conv3x3Only,
        CheckpointPolicy::CatProj,
        CheckpointPolicy::CatProjAnd3x3,
        CheckpointPolicy::BlockStemTdUp,
        CheckpointPolicy::UnitWhole,
        CheckpointPolicy::UnitWholePlusStemTdUp,
    ];

    pub fn name(&self) -> String {
        match self {
            CheckpointPolicy::None => "none".into(),
            CheckpointPolicy::Conv3x3Only => "conv3x3_only".into(),
            CheckpointPolicy::CatProj => "cat_proj".into(),
            CheckpointPolicy::CatProjAnd3x3 => "cat_proj_and_3x3".into(),
            CheckpointPolicy::BlockStemTdUp => "block_stem_td_up".into(),
            CheckpointPolicy::UnitWhole => "unit_whole".into(),
            CheckpointPolicy::UnitWholePlusStemTdUp => "unit_whole_plus_stem_td_up".into(),
            CheckpointPolicy::Custom(groups) => {
                let gs: Vec<String> = groups
                    .iter()
                    .map(|g| g.iter().map(|p| p.name()).collect::<Vec<_>>().join("+"))
                    .collect();
                format!("custom:{}", gs.join(","))
            }
        }
    }

    /// Human label in the parenthesized segment notation.
    pub fn label(&self) -> String {
        match self {
            CheckpointPolicy::None => "baseline - no ckpt".into(),
            CheckpointPolicy::Conv3x3Only => "(3x3)".into(),
            CheckpointPolicy::CatProj => "(cat 1x1)".into(),
            CheckpointPolicy::CatProjAnd3x3 => "(cat 1x1) (3x3)".into(),
            CheckpointPolicy::BlockStemTdUp => "(block) (stem) (TD) (UP)".into(),
            CheckpointPolicy::UnitWhole => "(cat 1x1 3x3)".into(),
            CheckpointPolicy::UnitWholePlusStemTdUp => "(cat 1x1 3x3) (stem) (TD) (UP)".into(),
            CheckpointPolicy::Custom(_) => self.name(),
        }
    }

    pub fn groups(&self) -> Vec<Vec<Part>> {
        use Part::*;
        let unit = vec![Cat, Proj1x1, Conv3x3];
        let outer = [vec![Stem], vec![Td], vec![Tu], vec![Spp]];
        match self {
            CheckpointPolicy::None => vec![],
            CheckpointPolicy::Conv3x3Only => vec![vec![Conv3x3]],
            CheckpointPolicy::CatProj => vec![vec![Cat, Proj1x1]],
            CheckpointPolicy::CatProjAnd3x3 => vec![vec![Cat, Proj1x1], vec![Conv3x3]],
            CheckpointPolicy::BlockStemTdUp => {
                let mut g = vec![vec![Cat, Proj1x1, Conv3x3, BlockCat, SplitPool]];
                g.extend(outer);
                g
            }
            CheckpointPolicy::UnitWhole => vec![unit],
            CheckpointPolicy::UnitWholePlusStemTdUp => {
                let mut g = vec![unit];
                g.extend(outer);
                g
            }
            CheckpointPolicy::Custom(groups) => groups.clone(),
        }
    }
}

impl fmt::Display for CheckpointPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for CheckpointPolicy {
    type Err = Error;

    /// Accepts the named policies and `custom:a+b,c` (groups separated by
    /// commas, parts within a group by `+`).
    fn from_str(s: &str) -> Result<Self> {
        if let Some(p) = CheckpointPolicy::TABLE.iter().find(|p| p.name() == s) {
            return Ok(p.clone());
        }
        let body = s
            .strip_prefix("custom:")
            .ok_or_else(|| Error::Policy(format!("unknown policy `{}`", s)))?;
        let mut groups = Vec::new();
        for g in body.split(',') {
            let parts = g
                .split('+')
                .map(|p| {
                    Part::parse(p.trim())
                        .ok_or_else(|| Error::Policy(format!("unknown tag `{}`", p)))
                })
                .collect::<Result<Vec<_>>>()?;
            groups.push(parts);
        }
        Ok(CheckpointPolicy::Custom(groups))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub first: usize,
    pub last: usize,
    /// Nodes re-executed before the segment's backward, in recording order.
    pub recompute: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Plan {
    pub segment_of: Vec<Option<usize>>,
    pub cached: Vec<bool>,
    pub segments: Vec<Segment>,
}

impl Plan {
    /// Bytes retained after the forward pass (cached node outputs).
    pub fn cached_bytes(&self, graph: &Graph) -> usize {
        graph
            .nodes
            .iter()
            .zip(&self.cached)
            .filter(|(_, &c)| c)
            .map(|(n, _)| n.bytes())
            .sum()
    }

    /// Bytes of the largest single segment recomputation.
    pub fn max_recompute_bytes(&self, graph: &Graph) -> usize {
        self.segments
            .iter()
            .map(|s| {
                s.recompute
                    .iter()
                    .map(|&i| graph.nodes[i].bytes())
                    .sum::<usize>()
            })
            .max()
            .unwrap_or(0)
    }
}

/// Segment key of a node under `groups`: group index plus instance.
fn key(graph: &Graph, groups: &[Vec<Part>], i: usize) -> Option<(usize, usize)> {
    let tag = graph.nodes[i].tag;
    let g = groups.iter().position(|g| g.contains(&tag.part))?;
    let block_level = groups[g]
        .iter()
        .any(|p| matches!(p, Part::BlockCat | Part::SplitPool));
    let instance = match (block_level, tag.stage) {
        (true, Stage::Block(b)) => b,
        _ => tag.instance,
    };
    Some((g, instance))
}

/// Derives segments, caching flags, and recomputation lists.
pub fn plan(graph: &Graph, policy: &CheckpointPolicy) -> Result<Plan> {
    let mut groups = policy.groups();
    // named policies skip outer groups a model lacks (no transitions in a
    // residual backbone, no upsampling without a ladder); custom ones do not
    if !matches!(policy, CheckpointPolicy::Custom(_)) {
        let mut first = true;
        groups.retain(|g| std::mem::take(&mut first) || g.iter().any(|&p| graph.has_part(p)));
    }
    for g in &groups {
        if g.is_empty() {
            return Err(Error::Policy("empty segment group".into()));
        }
        if g.contains(&Part::Input) {
            return Err(Error::Policy(
                "the input image cannot be part of a segment".into(),
            ));
        }
        if !g.iter().any(|&p| graph.has_part(p)) {
            let names: Vec<&str> = g.iter().map(|p| p.name()).collect();
            return Err(Error::Policy(format!(
                "policy `{}` references tags [{}] absent from the model",
                policy.name(),
                names.join(", ")
            )));
        }
    }

    let n = graph.len();
    let mut segment_of = vec![None; n];
    let mut segments: Vec<Segment> = Vec::new();
    let mut prev: Option<(usize, usize)> = None;
    for (i, slot) in segment_of.iter_mut().enumerate() {
        let k = key(graph, &groups, i);
        match k {
            Some(k) if prev == Some(k) => {
                let s = segments.len() - 1;
                segments[s].last = i;
                *slot = Some(s);
            }
            Some(_) => {
                segments.push(Segment {
                    first: i,
                    last: i,
                    recompute: vec![],
                });
                *slot = Some(segments.len() - 1);
            }
            None => {}
        }
        prev = k;
    }

    let consumers = graph.consumers();
    let cached: Vec<bool> = (0..n)
        .map(|i| {
            let seg = segment_of[i];
            seg.is_none()
                || graph.is_output(super::graph::NodeId(i))
                || consumers[i].iter().any(|&j| segment_of[j] != seg)
        })
        .collect();

    for (s, seg) in segments.iter_mut().enumerate() {
        let inside = |v: usize| segment_of[v] == Some(s) && !cached[v];
        let mut need = BTreeSet::new();
        for j in seg.first..=seg.last {
            let node = &graph.nodes[j];
            if node.op.backward_needs_output() && inside(j) {
                need.insert(j);
            }
            for (k, u) in node.inputs.iter().enumerate() {
                if node.op.backward_needs_input(k) && inside(u.0) {
                    need.insert(u.0);
                }
            }
        }
        // close over the producers needed to replay the required nodes
        let mut stack: Vec<usize> = need.iter().copied().collect();
        while let Some(v) = stack.pop() {
            for u in &graph.nodes[v].inputs {
                if inside(u.0) && need.insert(u.0) {
                    stack.push(u.0);
                }
            }
        }
        seg.recompute = need.into_iter().collect();
    }

    Ok(Plan {
        segment_of,
        cached,
        segments,
    })
}
