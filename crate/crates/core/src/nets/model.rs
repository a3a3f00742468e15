//! A parameterized model: architecture, weights, and per-shape graphs.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autograd::exec::forward;
use crate::autograd::params::ParamStore;
use crate::error::{shape_err, Result};
use crate::kernels::norm::BnMode;
use crate::kernels::resize::bilinear_resize;
use crate::tensor::Tensor;

use super::ladder::{build, LadderGraph};
use super::spec::ArchSpec;

#[derive(Debug)]
pub struct Model {
    pub spec: ArchSpec,
    pub store: ParamStore,
    graphs: HashMap<[usize; 3], Arc<LadderGraph>>,
}

impl Model {
    /// Initializes parameters deterministically from `seed`.
    pub fn new(spec: ArchSpec, seed: u64) -> Result<Self> {
        let d = spec.downsample_factor;
        let g = build(&spec, 1, d, d)?;
        let store = ParamStore::init(&g.graph, seed);
        Ok(Model {
            spec,
            store,
            graphs: HashMap::new(),
        })
    }

    /// Wraps existing parameters after checking their layout.
    pub fn from_store(spec: ArchSpec, store: ParamStore) -> Result<Self> {
        let d = spec.downsample_factor;
        let g = build(&spec, 1, d, d)?;
        store.check_layout(&g.graph)?;
        Ok(Model {
            spec,
            store,
            graphs: HashMap::new(),
        })
    }

    /// The graph for a batch of `n` images of size `h`×`w`, built once per shape.
    pub fn graph(&mut self, n: usize, h: usize, w: usize) -> Result<Arc<LadderGraph>> {
        if let Some(g) = self.graphs.get(&[n, h, w]) {
            return Ok(g.clone());
        }
        let g = Arc::new(build(&self.spec, n, h, w)?);
        self.store.check_layout(&g.graph)?;
        if self.graphs.len() > 16 {
            self.graphs.clear();
        }
        self.graphs.insert([n, h, w], g.clone());
        Ok(g)
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Runs every head without recording a trace.
    pub fn forward(&mut self, x: &Tensor<f32>, mode: BnMode) -> Result<Vec<Tensor<f32>>> {
        let (n, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(shape_err!("model input needs 3 channels, got {}", c));
        }
        let g = self.graph(n, h, w)?;
        forward(&g.graph, &mut self.store, x.clone(), mode)
    }

    /// Final-head logits bilinearly upsampled to the input resolution,
    /// using the running batch-norm statistics.
    pub fn predict(&mut self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, _, h, w) = x.dims4()?;
        let mut outs = self.forward(x, BnMode::Eval)?;
        let logits = outs.swap_remove(0);
        bilinear_resize(&logits, h, w)
    }
}
