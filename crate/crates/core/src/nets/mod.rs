//! Ladder DenseNet and residual baselines built as static graphs.

pub mod emulate;
pub mod ladder;
pub mod model;
pub mod spec;

pub use ladder::{build, HeadInfo, HeadKind, LadderGraph, SPP_GRIDS};
pub use model::Model;
pub use spec::{ArchSpec, Backbone, Family, Split};
