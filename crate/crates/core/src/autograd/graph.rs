//! Static computation graphs and the builder used by the network code.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kernels::conv::ConvParams;
use crate::kernels::elementwise::concat_shape;
use crate::kernels::pool::PoolParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Role of a node inside the network, used to form checkpoint segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Input,
    Stem,
    /// Concatenation feeding a dense unit (or the merge of a residual unit).
    Cat,
    /// BN-ReLU-conv1×1 bottleneck of a unit.
    Proj1x1,
    /// BN-ReLU-conv3×3 of a unit.
    Conv3x3,
    /// Concatenation forming a dense block output.
    BlockCat,
    /// Strided pooling inside a split dense block.
    SplitPool,
    /// Transition-down.
    Td,
    Spp,
    /// Transition-up (including the logit heads attached to it).
    Tu,
    /// Anything else (e.g. standalone test graphs).
    Other,
}

impl Part {
    pub const ALL: [Part; 11] = [
        Part::Input,
        Part::Stem,
        Part::Cat,
        Part::Proj1x1,
        Part::Conv3x3,
        Part::BlockCat,
        Part::SplitPool,
        Part::Td,
        Part::Spp,
        Part::Tu,
        Part::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Part::Input => "input",
            Part::Stem => "stem",
            Part::Cat => "cat",
            Part::Proj1x1 => "proj1x1",
            Part::Conv3x3 => "conv3x3",
            Part::BlockCat => "block_cat",
            Part::SplitPool => "split_pool",
            Part::Td => "td",
            Part::Spp => "spp",
            Part::Tu => "tu",
            Part::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Part> {
        Part::ALL.iter().copied().find(|p| p.name() == s)
    }

    /// Parts that make up a dense or residual block.
    pub fn is_block_part(self) -> bool {
        matches!(
            self,
            Part::Cat | Part::Proj1x1 | Part::Conv3x3 | Part::BlockCat | Part::SplitPool
        )
    }
}

/// Coarse position in the network, used for cost reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Input,
    Stem,
    /// Dense/residual block `i` (0-based), including a split pool.
    Block(usize),
    /// Transition after block `i`.
    Transition(usize),
    Spp,
    /// Transition-up `i` counted from the deepest one.
    Up(usize),
    /// Logit head `i` (auxiliary heads and the final classifier).
    Head(usize),
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tag {
    pub part: Part,
    /// Instance of the part: unit index for unit parts, transition index, etc.
    pub instance: usize,
    pub stage: Stage,
}

impl Tag {
    pub fn new(part: Part, instance: usize, stage: Stage) -> Self {
        Tag {
            part,
            instance,
            stage,
        }
    }

    pub fn other() -> Self {
        Tag::new(Part::Other, 0, Stage::Other)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Conv {
        weight: ParamId,
        params: ConvParams,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        slot: usize,
    },
    Relu,
    Add,
    Concat,
    Pool(PoolParams),
    GridPool {
        rows: usize,
        cols: usize,
    },
    Resize {
        h: usize,
        w: usize,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv { .. } => "conv",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Concat => "concat",
            Op::Pool(_) => "pool",
            Op::GridPool { .. } => "grid_pool",
            Op::Resize { .. } => "resize",
        }
    }

    /// Whether the backward step reads input `i` / the node's own output.
    pub fn backward_needs_input(&self, _i: usize) -> bool {
        match self {
            Op::Conv { .. } | Op::BatchNorm { .. } => true,
            Op::Pool(p) => p.kind == crate::kernels::pool::PoolKind::Max,
            _ => false,
        }
    }

    pub fn backward_needs_output(&self) -> bool {
        matches!(self, Op::Relu)
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub tag: Tag,
    pub name: String,
}

impl Node {
    /// Bytes of the node's f32 output.
    pub fn bytes(&self) -> usize {
        self.shape.iter().product::<usize>() * 4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    ConvWeight { fan_in: usize },
    BnGamma,
    BnBeta,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A named graph output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Output {
    pub node: NodeId,
    pub label: String,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub params: Vec<ParamSpec>,
    /// Channel count of each batch-norm statistics slot.
    pub bn_slots: Vec<usize>,
    pub outputs: Vec<Output>,
}

impl Graph {
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    /// Consumers of every node, in recording order.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for u in &n.inputs {
                if !out[u.0].contains(&i) {
                    out[u.0].push(i);
                }
            }
        }
        out
    }

    pub fn is_output(&self, id: NodeId) -> bool {
        self.outputs.iter().any(|o| o.node == id)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Total bytes of every node output (one f32 value per element).
    pub fn activation_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.bytes()).sum()
    }

    pub fn has_part(&self, part: Part) -> bool {
        self.nodes.iter().any(|n| n.tag.part == part)
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Records nodes under a current tag and name scope.
#[derive(Debug)]
pub struct GraphBuilder {
    graph: Graph,
    tag: Tag,
    scope: Vec<String>,
}

impl GraphBuilder {
    /// Starts a graph whose node 0 is the input of the given NCHW shape.
    pub fn new(input_shape: &[usize]) -> Result<Self> {
        if input_shape.len() != 4 || input_shape.contains(&0) {
            return Err(shape_err!(
                "graph input must be a non-empty NCHW shape, got {:?}",
                input_shape
            ));
        }
        let graph = Graph {
            nodes: vec![Node {
                op: Op::Input,
                inputs: vec![],
                shape: input_shape.to_vec(),
                tag: Tag::new(Part::Input, 0, Stage::Input),
                name: "input".into(),
            }],
            ..Graph::default()
        };
        Ok(GraphBuilder {
            graph,
            tag: Tag::other(),
            scope: vec![],
        })
    }

    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.graph.nodes[id.0].shape
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.shape(id)[1]
    }

    pub fn hw(&self, id: NodeId) -> (usize, usize) {
        let s = self.shape(id);
        (s[2], s[3])
    }

    /// Sets the tag for subsequently recorded nodes, returning the previous one.
    pub fn set_tag(&mut self, tag: Tag) -> Tag {
        std::mem::replace(&mut self.tag, tag)
    }

    pub fn tag(&self) -> Tag {
        self.tag
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    fn qualified(&self, leaf: &str) -> String {
        let mut s = self.scope.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, leaf: &str) -> NodeId {
        let name = self.qualified(leaf);
        self.graph.nodes.push(Node {
            op,
            inputs,
            shape,
            tag: self.tag,
            name,
        });
        NodeId(self.graph.nodes.len() - 1)
    }

    fn param(&mut self, leaf: &str, shape: Vec<usize>, kind: ParamKind) -> Result<ParamId> {
        let name = self.qualified(leaf);
        if self.graph.params.iter().any(|p| p.name == name) {
            return Err(Error::Spec(format!("duplicate parameter name `{}`", name)));
        }
        self.graph.params.push(ParamSpec { name, shape, kind });
        Ok(ParamId(self.graph.params.len() - 1))
    }

    pub fn conv(&mut self, x: NodeId, p: ConvParams, leaf: &str) -> Result<NodeId> {
        p.validate()?;
        let s = self.shape(x).to_vec();
        if s[1] != p.in_channels {
            return Err(shape_err!(
                "conv `{}` expects {} input channels, got shape {:?}",
                self.qualified(leaf),
                p.in_channels,
                s
            ));
        }
        let (oh, ow) = p.output_hw(s[2], s[3])?;
        let weight = self.param(
            &format!("{}.weight", leaf),
            p.weight_shape().to_vec(),
            ParamKind::ConvWeight { fan_in: p.fan_in() },
        )?;
        Ok(self.push(
            Op::Conv { weight, params: p },
            vec![x],
            vec![s[0], p.out_channels, oh, ow],
            leaf,
        ))
    }

    pub fn batch_norm(&mut self, x: NodeId, leaf: &str) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let c = s[1];
        let gamma = self.param(&format!("{}.gamma", leaf), vec![c], ParamKind::BnGamma)?;
        let beta = self.param(&format!("{}.beta", leaf), vec![c], ParamKind::BnBeta)?;
        self.graph.bn_slots.push(c);
        let slot = self.graph.bn_slots.len() - 1;
        Ok(self.push(Op::BatchNorm { gamma, beta, slot }, vec![x], s, leaf))
    }

    pub fn relu(&mut self, x: NodeId, leaf: &str) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Relu, vec![x], s, leaf)
    }

    /// BN → ReLU → conv, the pre-activation building block.
    pub fn bn_relu_conv(&mut self, x: NodeId, p: ConvParams, leaf: &str) -> Result<NodeId> {
        let b = self.batch_norm(x, &format!("{}.bn", leaf))?;
        let r = self.relu(b, &format!("{}.relu", leaf));
        self.conv(r, p, leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, leaf: &str) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(shape_err!(
                "add `{}`: {:?} vs {:?}",
                self.qualified(leaf),
                sa,
                sb
            ));
        }
        Ok(self.push(Op::Add, vec![a, b], sa, leaf))
    }

    pub fn concat(&mut self, parts: &[NodeId], leaf: &str) -> Result<NodeId> {
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
        let s = concat_shape(&shapes)?;
        Ok(self.push(Op::Concat, parts.to_vec(), s, leaf))
    }

    pub fn pool(&mut self, x: NodeId, p: PoolParams, leaf: &str) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let (oh, ow) = p.output_hw(s[2], s[3])?;
        Ok(self.push(Op::Pool(p), vec![x], vec![s[0], s[1], oh, ow], leaf))
    }

    pub fn grid_pool(&mut self, x: NodeId, rows: usize, cols: usize, leaf: &str) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if rows == 0 || cols == 0 || rows > s[2] || cols > s[3] {
            return Err(shape_err!(
                "grid {}x{} does not fit a {}x{} plane",
                rows,
                cols,
                s[2],
                s[3]
            ));
        }
        Ok(self.push(
            Op::GridPool { rows, cols },
            vec![x],
            vec![s[0], s[1], rows, cols],
            leaf,
        ))
    }

    pub fn resize(&mut self, x: NodeId, h: usize, w: usize, leaf: &str) -> Result<NodeId> {
        if h == 0 || w == 0 {
            return Err(shape_err!(
                "resize `{}` to {}x{}",
                self.qualified(leaf),
                h,
                w
            ));
        }
        let s = self.shape(x).to_vec();
        Ok(self.push(Op::Resize { h, w }, vec![x], vec![s[0], s[1], h, w], leaf))
    }

    pub fn mark_output(&mut self, node: NodeId, label: impl Into<String>) {
        self.graph.outputs.push(Output {
            node,
            label: label.into(),
        });
    }

    pub fn finish(self) -> Graph {
        self.graph
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_tracks_shapes_and_params() {
        let mut b = GraphBuilder::new(&[2, 3, 8, 8]).unwrap();
        b.push_scope("stem");
        let c = b
            .conv(b.input(), ConvParams::square(3, 4, 3, 2, 1), "conv")
            .unwrap();
        let y = b
            .bn_relu_conv(c, ConvParams::pointwise(4, 6), "mix")
            .unwrap();
        b.pop_scope();
        b.mark_output(y, "out");
        let g = b.finish();
        assert_eq!(g.node(y).shape, vec![2, 6, 4, 4]);
        let names: Vec<&str> = g.params.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "stem.conv.weight",
                "stem.mix.bn.gamma",
                "stem.mix.bn.beta",
                "stem.mix.weight"
            ]
        );
        assert_eq!(g.param_count(), 3 * 4 * 9 + 4 + 4 + 24);
        assert_eq!(g.bn_slots, vec![4]);
        assert!(g.is_output(y));
    }

    #[test]
    fn builder_rejects_mismatch() {
        let mut b = GraphBuilder::new(&[1, 3, 4, 4]).unwrap();
        assert!(b.conv(b.input(), ConvParams::pointwise(4, 4), "c").is_err());
        let r = b.relu(b.input(), "r");
        let p = b
            .pool(
                r,
                PoolParams::new(crate::kernels::pool::PoolKind::Avg, 2, 2, 0),
                "p",
            )
            .unwrap();
        assert!(b.add(r, p, "a").is_err());
        assert!(b.concat(&[r, p], "c").is_err());
    }
}
