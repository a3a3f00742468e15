//! Builds the static graph of a ladder-style segmentation model.

use crate::autograd::graph::{Graph, GraphBuilder, NodeId, Part, Stage, Tag};
use crate::error::{Error, Result};
use crate::kernels::conv::ConvParams;
use crate::kernels::pool::{grid_cols, PoolKind, PoolParams};

use super::spec::{ArchSpec, Family, Split};

/// Pyramid pooling grid rows, from the coarsest.
pub const SPP_GRIDS: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// The classifier whose upsampled output is the prediction.
    Final,
    /// Auxiliary head after transition-up `i` (the last one shares its
    /// input with the final classifier).
    Up(usize),
    /// Auxiliary head on the pooled pyramid branch with this many grid rows.
    SppGrid(usize),
}

#[derive(Clone, Debug)]
pub struct HeadInfo {
    pub label: String,
    pub kind: HeadKind,
    pub node: NodeId,
}

/// A built graph plus the meaning of each of its outputs. Outputs appear in
/// the same order as `heads`; the final classifier comes first.
#[derive(Clone, Debug)]
pub struct LadderGraph {
    pub graph: Graph,
    pub heads: Vec<HeadInfo>,
}

impl LadderGraph {
    pub fn final_head(&self) -> &HeadInfo {
        &self.heads[0]
    }
}

struct Builder<'a> {
    spec: &'a ArchSpec,
    b: GraphBuilder,
    unit_counter: usize,
    heads: Vec<HeadInfo>,
    /// Last feature tensor at each input stride, shallow to deep.
    levels: Vec<(usize, NodeId)>,
}

impl<'a> Builder<'a> {
    fn tag(&mut self, part: Part, instance: usize, stage: Stage) {
        self.b.set_tag(Tag::new(part, instance, stage));
    }

    fn record_level(&mut self, stride: usize, node: NodeId) {
        match self.levels.last_mut() {
            Some(last) if last.0 == stride => last.1 = node,
            _ => self.levels.push((stride, node)),
        }
    }

    fn stem(&mut self) -> Result<NodeId> {
        let w = self.spec.stem();
        self.tag(Part::Stem, 0, Stage::Stem);
        self.b.push_scope("stem");
        let x = self.b.input();
        let c = self.b.conv(x, ConvParams::square(3, w, 7, 2, 3), "conv")?;
        let n = self.b.batch_norm(c, "bn")?;
        let r = self.b.relu(n, "relu");
        self.record_level(2, r);
        let p = self
            .b
            .pool(r, PoolParams::new(PoolKind::Max, 3, 2, 1), "pool")?;
        self.b.pop_scope();
        Ok(p)
    }

    fn dense_unit(
        &mut self,
        feats: &[NodeId],
        k: usize,
        dilation: usize,
        block: usize,
    ) -> Result<NodeId> {
        let id = self.unit_counter;
        self.unit_counter += 1;
        self.b.push_scope(format!("unit{}", id));
        let x = if feats.len() == 1 {
            feats[0]
        } else {
            self.tag(Part::Cat, id, Stage::Block(block));
            self.b.concat(feats, "cat")?
        };
        let c = self.b.channels(x);
        self.tag(Part::Proj1x1, id, Stage::Block(block));
        let h = self
            .b
            .bn_relu_conv(x, ConvParams::pointwise(c, 4 * k), "conv1")?;
        self.tag(Part::Conv3x3, id, Stage::Block(block));
        let p = ConvParams::square(4 * k, k, 3, 1, dilation).with_dilation(dilation);
        let y = self.b.bn_relu_conv(h, p, "conv2")?;
        self.b.pop_scope();
        Ok(y)
    }

    fn dense_block(
        &mut self,
        x: NodeId,
        block: usize,
        n: usize,
        k: usize,
        split: Option<Split>,
        stride: &mut usize,
    ) -> Result<NodeId> {
        let dilation = self.spec.dilation_list()[block];
        self.b.push_scope(format!("block{}", block + 1));
        let mut feats = vec![x];
        for u in 0..n {
            if split.is_some_and(|s| s.after_unit == u) {
                self.tag(Part::BlockCat, block, Stage::Block(block));
                let cat = self.b.concat(&feats, "cat_a")?;
                self.record_level(*stride, cat);
                self.tag(Part::SplitPool, block, Stage::Block(block));
                let pooled =
                    self.b
                        .pool(cat, PoolParams::new(PoolKind::Avg, 2, 2, 0), "split_pool")?;
                *stride *= 2;
                feats = vec![pooled];
            }
            let y = self.dense_unit(&feats, k, dilation, block)?;
            feats.push(y);
        }
        self.tag(Part::BlockCat, block, Stage::Block(block));
        let out = self.b.concat(&feats, "cat")?;
        self.record_level(*stride, out);
        self.b.pop_scope();
        Ok(out)
    }

    fn transition_down(&mut self, x: NodeId, block: usize, pools: bool) -> Result<NodeId> {
        self.tag(Part::Td, block, Stage::Transition(block));
        self.b.push_scope(format!("td{}", block + 1));
        let c = self.b.channels(x);
        let mut y = self
            .b
            .bn_relu_conv(x, ConvParams::pointwise(c, c / 2), "conv")?;
        if pools {
            y = self
                .b
                .pool(y, PoolParams::new(PoolKind::Avg, 2, 2, 0), "pool")?;
        }
        self.b.pop_scope();
        Ok(y)
    }

    fn residual_unit(
        &mut self,
        x: NodeId,
        out: usize,
        stride: usize,
        block: usize,
        bottleneck: bool,
    ) -> Result<NodeId> {
        let id = self.unit_counter;
        self.unit_counter += 1;
        self.b.push_scope(format!("unit{}", id));
        let c = self.b.channels(x);
        self.tag(Part::Proj1x1, id, Stage::Block(block));
        let n = self.b.batch_norm(x, "pre.bn")?;
        let a = self.b.relu(n, "pre.relu");
        let (r, shortcut_src) = if bottleneck {
            let mid = out / 4;
            let h = self.b.conv(a, ConvParams::pointwise(c, mid), "conv1")?;
            self.tag(Part::Conv3x3, id, Stage::Block(block));
            let h = self
                .b
                .bn_relu_conv(h, ConvParams::square(mid, mid, 3, stride, 1), "conv2")?;
            self.tag(Part::Cat, id, Stage::Block(block));
            (
                self.b
                    .bn_relu_conv(h, ConvParams::pointwise(mid, out), "conv3")?,
                a,
            )
        } else {
            self.tag(Part::Conv3x3, id, Stage::Block(block));
            let h = self
                .b
                .conv(a, ConvParams::square(c, out, 3, stride, 1), "conv1")?;
            let h = self
                .b
                .bn_relu_conv(h, ConvParams::square(out, out, 3, 1, 1), "conv2")?;
            self.tag(Part::Cat, id, Stage::Block(block));
            (h, a)
        };
        let shortcut = if c != out || stride != 1 {
            self.b.conv(
                shortcut_src,
                ConvParams::square(c, out, 1, stride, 0),
                "proj",
            )?
        } else {
            x
        };
        let y = self.b.add(r, shortcut, "add")?;
        self.b.pop_scope();
        Ok(y)
    }

    fn head(&mut self, x: NodeId, kind: HeadKind, part: Part, instance: usize) -> Result<NodeId> {
        let index = self.heads.len();
        let label = match &kind {
            HeadKind::Final => "logits".to_string(),
            HeadKind::Up(i) => format!("aux.up{}", i),
            HeadKind::SppGrid(r) => format!("aux.grid{}", r),
        };
        let prev = self.b.set_tag(Tag::new(part, instance, Stage::Head(index)));
        self.b
            .push_scope(format!("head.{}", label.replace('.', "_")));
        let c = self.b.channels(x);
        let y = self
            .b
            .bn_relu_conv(x, ConvParams::pointwise(c, self.spec.num_classes), "conv")?;
        self.b.pop_scope();
        self.b.set_tag(prev);
        self.heads.push(HeadInfo {
            label,
            kind,
            node: y,
        });
        Ok(y)
    }

    fn spp(&mut self, x: NodeId, aux: bool) -> Result<NodeId> {
        self.tag(Part::Spp, 0, Stage::Spp);
        self.b.push_scope("spp");
        let d = self.b.channels(x);
        let (h, w) = self.b.hw(x);
        let out = if self.spec.use_spp {
            let p = self
                .b
                .bn_relu_conv(x, ConvParams::pointwise(d, d / 2), "proj")?;
            let mut parts = vec![p];
            for &g in &SPP_GRIDS {
                let rows = g.min(h);
                let cols = grid_cols(rows, h, w).min(w);
                self.b.push_scope(format!("grid{}", g));
                let gp = self.b.grid_pool(p, rows, cols, "pool")?;
                let br = self
                    .b
                    .bn_relu_conv(gp, ConvParams::pointwise(d / 2, d / 8), "conv")?;
                self.b.pop_scope();
                if aux {
                    self.head(br, HeadKind::SppGrid(g), Part::Spp, 0)?;
                    self.tag(Part::Spp, 0, Stage::Spp);
                }
                parts.push(self.b.resize(br, h, w, &format!("grid{}.up", g))?);
            }
            let cat = self.b.concat(&parts, "cat")?;
            self.b
                .bn_relu_conv(cat, ConvParams::pointwise(d, d / 4), "fuse")?
        } else {
            self.b
                .bn_relu_conv(x, ConvParams::square(d, d / 4, 3, 1, 1), "conv")?
        };
        self.b.pop_scope();
        Ok(out)
    }

    fn transition_up(&mut self, low: NodeId, skip: NodeId, i: usize) -> Result<NodeId> {
        self.tag(Part::Tu, i, Stage::Up(i));
        self.b.push_scope(format!("up{}", i));
        let width = self.spec.upsample_width;
        let c_low = self.b.channels(low);
        let (h, w) = self.b.hw(skip);
        let (lh, lw) = self.b.hw(low);
        if (h, w) != (2 * lh, 2 * lw) {
            return Err(Error::Shape(format!(
                "skip of {}x{} is not twice the {}x{} low-resolution path",
                h, w, lh, lw
            )));
        }
        let up = self.b.resize(low, h, w, "resize")?;
        let c_skip = self.b.channels(skip);
        let s = self
            .b
            .bn_relu_conv(skip, ConvParams::pointwise(c_skip, c_low), "skip")?;
        let mut y = self.b.add(up, s, "add")?;
        if c_low != width {
            y = self
                .b
                .bn_relu_conv(y, ConvParams::pointwise(c_low, width), "mix")?;
        }
        let y = if self.spec.dws_upsampling {
            let dw = ConvParams::square(width, width, 3, 1, 1).with_groups(width);
            let t = self.b.bn_relu_conv(y, dw, "dw")?;
            self.b.conv(t, ConvParams::pointwise(width, width), "pw")?
        } else {
            self.b
                .bn_relu_conv(y, ConvParams::square(width, width, 3, 1, 1), "conv")?
        };
        self.b.pop_scope();
        Ok(y)
    }
}

/// Builds the model graph for an NCHW input of shape `[n, 3, h, w]`.
pub fn build(spec: &ArchSpec, n: usize, h: usize, w: usize) -> Result<LadderGraph> {
    spec.validate()?;
    let d = spec.downsample_factor;
    if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
        return Err(Error::InvalidArgument(format!(
            "input {}x{} is not divisible by the downsampling factor {}",
            h, w, d
        )));
    }
    let mut bld = Builder {
        spec,
        b: GraphBuilder::new(&[n, 3, h, w])?,
        unit_counter: 0,
        heads: Vec::new(),
        levels: Vec::new(),
    };
    let mut x = bld.stem()?;
    let mut stride = 4;
    let units = spec.units();
    let nb = units.len();
    let splits = spec.splits()?;
    match spec.backbone.family() {
        Family::Dense { k } => {
            for (b, &nu) in units.iter().enumerate() {
                let split = splits.iter().copied().find(|s| s.block == b);
                x = bld.dense_block(x, b, nu, k, split, &mut stride)?;
                if b + 1 < nb {
                    let pools = spec.transition_pools(b);
                    x = bld.transition_down(x, b, pools)?;
                    if pools {
                        stride *= 2;
                    }
                }
            }
        }
        fam @ (Family::Bottleneck | Family::Basic) => {
            let channels = spec.block_channels();
            for (b, &nu) in units.iter().enumerate() {
                bld.b.push_scope(format!("block{}", b + 1));
                for u in 0..nu {
                    let s = if b > 0 && u == 0 { 2 } else { 1 };
                    x = bld.residual_unit(x, channels[b].1, s, b, fam == Family::Bottleneck)?;
                }
                if b > 0 {
                    stride *= 2;
                }
                bld.b.pop_scope();
                bld.record_level(stride, x);
            }
        }
    }
    if stride != d {
        return Err(Error::Spec(format!(
            "built network downsamples by {}, expected {}",
            stride, d
        )));
    }

    let tus = spec.num_tus();
    let aux = spec.aux_heads;
    let mut y = bld.spp(x, aux)?;
    for i in 0..tus {
        let want = d >> (i + 1);
        let skip = bld
            .levels
            .iter()
            .find(|(s, _)| *s == want)
            .map(|l| l.1)
            .ok_or_else(|| {
                Error::Spec(format!(
                    "no feature tensor at stride {} to serve as a skip",
                    want
                ))
            })?;
        y = bld.transition_up(y, skip, i)?;
        if aux {
            bld.head(y, HeadKind::Up(i), Part::Tu, i)?;
        }
    }
    let (part, inst) = if tus > 0 {
        (Part::Tu, tus - 1)
    } else {
        (Part::Spp, 0)
    };
    bld.head(y, HeadKind::Final, part, inst)?;

    // final head first, auxiliary heads in creation order
    let mut heads = bld.heads;
    let last = heads.pop().expect("final head");
    heads.insert(0, last);
    for hd in &heads {
        bld.b.mark_output(hd.node, hd.label.clone());
    }
    Ok(LadderGraph {
        graph: bld.b.finish(),
        heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::spec::Backbone;

    #[test]
    fn toy_shapes_and_heads() {
        let s = ArchSpec::toy();
        let lg = build(&s, 1, 128, 192).unwrap();
        let g = &lg.graph;
        assert_eq!(g.node(lg.final_head().node).shape, vec![1, 5, 32, 48]);
        let labels: Vec<&str> = lg.heads.iter().map(|h| h.label.as_str()).collect();
        assert_eq!(
            labels,
            [
                "logits",
                "aux.grid1",
                "aux.grid2",
                "aux.grid4",
                "aux.grid8",
                "aux.up0",
                "aux.up1",
                "aux.up2",
                "aux.up3"
            ]
        );
        assert_eq!(g.outputs.len(), lg.heads.len());
    }

    #[test]
    fn no_aux_heads_leaves_one_output() {
        let mut s = ArchSpec::toy();
        s.aux_heads = false;
        let lg = build(&s, 1, 64, 64).unwrap();
        assert_eq!(lg.graph.outputs.len(), 1);
    }

    #[test]
    fn dilated_without_upsampling() {
        let mut s = ArchSpec::new(Backbone::Toy {
            n: vec![2, 2, 2, 2],
            k: 8,
        });
        s.stem_width = Some(16);
        s.dilations = Some(vec![1, 1, 2, 4]);
        s.downsample_factor = 8;
        s.output_stride = 8;
        let lg = build(&s, 1, 64, 64).unwrap();
        assert_eq!(lg.graph.node(lg.final_head().node).shape, vec![1, 19, 8, 8]);
    }

    #[test]
    fn resnet18_builds_at_stride_32() {
        let s = ArchSpec::new(Backbone::Rn18);
        let lg = build(&s, 1, 64, 64).unwrap();
        assert_eq!(lg.graph.node(lg.final_head().node).shape[2..], [16, 16]);
    }

    #[test]
    fn rejects_indivisible_input() {
        assert!(build(&ArchSpec::toy(), 1, 32, 64).is_err());
        assert!(build(&ArchSpec::toy(), 1, 96, 64).is_err());
    }
}
