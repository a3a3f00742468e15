//! Parameter tensors and batch-norm statistics owned by a model.

use super::graph::{Graph, ParamId, ParamKind, ParamSpec};
use crate::error::{Error, Result};
use crate::kernels::norm::BnRunning;
use crate::rng::SplitMix64;
use crate::tensor::{fnv1a, Tensor};

#[derive(Clone, Debug)]
pub struct ParamStore {
    pub specs: Vec<ParamSpec>,
    pub values: Vec<Tensor<f32>>,
    pub bn: Vec<BnRunning>,
}

impl ParamStore {
    /// He-normal convolution weights (std `sqrt(2 / fan_in)`), unit BN
    /// scales and zero shifts. Each tensor draws from its own stream keyed by
    /// its index, so the result depends only on `seed` and the layout.
    pub fn init(graph: &Graph, seed: u64) -> Self {
        let values = graph
            .params
            .iter()
            .enumerate()
            .map(|(i, spec)| match spec.kind {
                ParamKind::ConvWeight { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let mut rng = SplitMix64::derive(seed, &[i as u64]);
                    Tensor::from_fn(&spec.shape, |_| (rng.normal() * std) as f32)
                }
                ParamKind::BnGamma => Tensor::full(&spec.shape, 1.0),
                ParamKind::BnBeta => Tensor::zeros(&spec.shape),
            })
            .collect();
        ParamStore {
            specs: graph.params.clone(),
            values,
            bn: graph.bn_slots.iter().map(|&c| BnRunning::new(c)).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<f32>> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.values[i])
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn bytes(&self) -> usize {
        self.values.iter().map(|v| v.byte_size()).sum()
    }

    /// Checks that `graph` declares exactly the parameters held here.
    pub fn check_layout(&self, graph: &Graph) -> Result<()> {
        if self.specs != graph.params || self.bn.len() != graph.bn_slots.len() {
            return Err(Error::Spec(
                "parameter layout does not match the graph".into(),
            ));
        }
        for (r, &c) in self.bn.iter().zip(&graph.bn_slots) {
            if r.channels() != c {
                return Err(Error::Spec(
                    "batch norm slot width does not match the graph".into(),
                ));
            }
        }
        Ok(())
    }

    /// FNV-1a over every parameter's bytes and every running statistic.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for v in &self.values {
            for x in v.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        for r in &self.bn {
            for x in r.mean.iter().chain(&r.var) {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::graph::GraphBuilder;
    use crate::kernels::conv::ConvParams;

    fn graph() -> Graph {
        let mut b = GraphBuilder::new(&[1, 64, 4, 4]).unwrap();
        let y = b
            .bn_relu_conv(b.input(), ConvParams::square(64, 8, 3, 1, 1), "c")
            .unwrap();
        b.mark_output(y, "y");
        b.finish()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let g = graph();
        let a = ParamStore::init(&g, 3);
        let b = ParamStore::init(&g, 3);
        let c = ParamStore::init(&g, 4);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn he_normal_scale() {
        let g = graph();
        assert_eq!(g.params[2].kind, ParamKind::ConvWeight { fan_in: 576 });
        let s = ParamStore::init(&g, 1);
        let w = s.by_name("c.weight").unwrap();
        let var = w.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 576.0).abs() < 0.2 * 2.0 / 576.0);
        assert!(s
            .by_name("c.bn.gamma")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }
}
