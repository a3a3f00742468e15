//! Static-graph reverse-mode differentiation with segment checkpointing.

pub mod equivalence;
pub mod exec;
pub mod graph;
pub mod memory;
pub mod params;
pub mod policy;

pub use equivalence::{compare_policies, policy_gradients, PolicyDiff};
pub use exec::{forward, measure_peak, trace_forward, Trace};
pub use graph::{
    Graph, GraphBuilder, Node, NodeId, Op, ParamId, ParamKind, ParamSpec, Part, Stage, Tag,
};
pub use memory::{MemoryReport, MemoryTracker};
pub use params::ParamStore;
pub use policy::{plan, CheckpointPolicy, Plan, Segment};
