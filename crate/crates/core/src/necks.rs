//! Backbone producing the P3–P5 pyramid and the interchangeable necks that
//! route it to the heads.
//!
//! Necks are stored as an explicit node list so their wiring can be audited
//! structurally (cross-level edges, upsample/downsample kinds) without
//! running them.

use std::fmt::Write as _;

use crate::blocks::{
    Activation, ConvBnAct, ConvKind, CspBlock, CspEntry, Downsample, DownsampleMode, Spp, UpsampleMode,
};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Builder, Ctx};
use crate::tensor::{dims4, Element};

/// Strides of the three pyramid levels handed to the neck.
pub const PYRAMID_STRIDES: [usize; 3] = [8, 16, 32];

/// Per-level feature maps, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures {
    pub levels: Vec<(usize, Var)>,
}

impl PyramidFeatures {
    pub fn new(levels: Vec<(usize, Var)>) -> Self {
        PyramidFeatures { levels }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.levels.iter().map(|&(_, v)| v).collect()
    }

    /// Checks strides and extents against the input image size.
    pub fn validate<E: Element>(&self, ctx: &Ctx<'_, E>, input_size: usize) -> Result<()> {
        let mut prev_stride = 0;
        let mut prev_c = 0;
        for &(stride, v) in &self.levels {
            let [_, c, h, w] = dims4(ctx.graph.shape(v), "pyramid")?;
            if stride <= prev_stride {
                return Err(Error::shape("pyramid", "strides must be strictly increasing"));
            }
            if c < prev_c {
                return Err(Error::shape("pyramid", "channel counts must not decrease with stride"));
            }
            if input_size % stride != 0 || h != input_size / stride || w != input_size / stride {
                return Err(Error::shape(
                    "pyramid",
                    format!("level stride {stride} has extent {h}x{w} for input {input_size}"),
                ));
            }
            prev_stride = stride;
            prev_c = c;
        }
        Ok(())
    }
}

// --------------------------------------------------------------- backbone

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneSpec {
    /// Output channels of the five stride-2 stages P1..P5.
    pub widths: Vec<usize>,
    /// Bottlenecks in the CSP block after each stage's downsample (0 = none).
    pub depths: Vec<usize>,
    pub downsample: DownsampleMode,
    pub body: ConvKind,
    pub act: Activation,
}

impl BackboneSpec {
    pub fn nano(downsample: DownsampleMode) -> Self {
        BackboneSpec {
            widths: vec![16, 32, 64, 128, 256],
            depths: vec![0, 1, 1, 1, 1],
            downsample,
            body: ConvKind::Plain,
            act: Activation::Silu,
        }
    }

    pub fn level_channels(&self) -> [usize; 3] {
        [self.widths[2], self.widths[3], self.widths[4]]
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub down: Downsample,
    pub csp: Option<CspBlock>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub stem: ConvBnAct,
    pub stem_csp: Option<CspBlock>,
    pub stages: Vec<Stage>,
    pub spp: Spp,
}

impl Backbone {
    pub fn build<E: Element>(b: &mut Builder<'_, E>, spec: &BackboneSpec) -> Result<Self> {
        if spec.widths.len() != 5 || spec.depths.len() != 5 {
            return Err(Error::config(format!(
                "backbone needs 5 stage widths and depths, got {} and {}",
                spec.widths.len(),
                spec.depths.len()
            )));
        }
        let act = spec.act;
        let csp = |b: &mut Builder<'_, E>, c: usize, n: usize| -> Result<Option<CspBlock>> {
            if n == 0 {
                return Ok(None);
            }
            b.scoped("csp", |b| CspBlock::build(b, c, c, n, CspEntry::Pointwise, spec.body, true, act))
                .map(Some)
        };
        let (stem, stem_csp) = b.scoped("p1", |b| {
            let stem = b.scoped("stem", |b| ConvBnAct::standard(b, 3, spec.widths[0], 3, 2, act))?;
            Ok::<_, Error>((stem, csp(b, spec.widths[0], spec.depths[0])?))
        })?;
        let mut stages = Vec::with_capacity(4);
        for i in 1..5 {
            let stage = b.scoped(&format!("p{}", i + 1), |b| {
                let down = b.scoped("down", |b| {
                    Downsample::build(b, spec.downsample, spec.widths[i - 1], spec.widths[i], act)
                })?;
                Ok::<_, Error>(Stage {
                    down,
                    csp: csp(b, spec.widths[i], spec.depths[i])?,
                })
            })?;
            stages.push(stage);
        }
        let spp = b.scoped("p5", |b| b.scoped("spp", |b| Spp::build(b, spec.widths[4], act)))?;
        Ok(Backbone {
            spec: spec.clone(),
            stem,
            stem_csp,
            stages,
            spp,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, image: Var) -> Result<PyramidFeatures> {
        let mut x = ctx.scoped("backbone/p1", |ctx| {
            let x = self.stem.forward(ctx, image)?;
            match &self.stem_csp {
                Some(c) => c.forward(ctx, x),
                None => Ok(x),
            }
        })?;
        let mut levels = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            let p = i + 2;
            x = ctx.scoped(&format!("backbone/p{p}"), |ctx| {
                let y = stage.down.forward(ctx, x)?;
                let y = match &stage.csp {
                    Some(c) => c.forward(ctx, y)?,
                    None => y,
                };
                if p == 5 {
                    self.spp.forward(ctx, y)
                } else {
                    Ok(y)
                }
            })?;
            if p >= 3 {
                levels.push((PYRAMID_STRIDES[p - 3], x));
            }
        }
        Ok(PyramidFeatures::new(levels))
    }
}

// ------------------------------------------------------------------ necks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NeckKind {
    /// Backbone levels go straight to the heads.
    None,
    /// Independent per-level bottleneck filters, no fusion.
    Ihp,
    Fpn,
    PanetSimplified,
    /// PANet-shaped graph with GSConvE-I entry convs in every fusion block.
    Sa,
}

impl NeckKind {
    pub fn name(self) -> &'static str {
        match self {
            NeckKind::None => "none",
            NeckKind::Ihp => "ihp",
            NeckKind::Fpn => "fpn",
            NeckKind::PanetSimplified => "panet_simplified",
            NeckKind::Sa => "sa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => NeckKind::None,
            "ihp" => NeckKind::Ihp,
            "fpn" => NeckKind::Fpn,
            "panet_simplified" | "panet" => NeckKind::PanetSimplified,
            "sa" => NeckKind::Sa,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeckSpec {
    pub kind: NeckKind,
    /// Channels of P3, P4, P5.
    pub channels: [usize; 3],
    /// Bottlenecks per fusion block.
    pub depth: usize,
    /// Bottlenecks per level in the IHP filter stack.
    pub ihp_depth: usize,
    pub upsample: UpsampleMode,
    pub downsample: DownsampleMode,
    pub body: ConvKind,
    pub act: Activation,
}

#[derive(Clone, Debug)]
pub enum NeckOp {
    Input(usize),
    Lateral(ConvBnAct),
    Upsample { scale: usize, mode: UpsampleMode },
    Downsample(Downsample),
    Concat,
    Fuse(CspBlock),
    Filter(Vec<crate::blocks::Bottleneck>),
}

impl NeckOp {
    pub fn label(&self) -> String {
        match self {
            NeckOp::Input(l) => format!("input(P{})", l + 3),
            NeckOp::Lateral(_) => "lateral1x1".into(),
            NeckOp::Upsample { scale, mode } => match mode {
                UpsampleMode::HardNn => format!("upsample(nn,x{scale})"),
                UpsampleMode::Sni(_) => format!("upsample(sni,x{scale})"),
            },
            NeckOp::Downsample(Downsample::Conv(_)) => "downsample(conv)".into(),
            NeckOp::Downsample(Downsample::Esd(e)) => format!("downsample(esd-{:?})", e.variant),
            NeckOp::Concat => "concat".into(),
            NeckOp::Fuse(_) => "csp".into(),
            NeckOp::Filter(m) => format!("filter(bottleneck x{})", m.len()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NeckNode {
    pub name: String,
    pub op: NeckOp,
    pub inputs: Vec<usize>,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct Neck {
    pub spec: NeckSpec,
    pub nodes: Vec<NeckNode>,
    pub outputs: [usize; 3],
}

struct NeckBuilder<'b, 'a, E: Element> {
    b: &'b mut Builder<'a, E>,
    nodes: Vec<NeckNode>,
}

impl<E: Element> NeckBuilder<'_, '_, E> {
    fn add(&mut self, name: &str, stride: usize, inputs: Vec<usize>, op: impl FnOnce(&mut Builder<'_, E>) -> Result<NeckOp>) -> Result<usize> {
        let op = self.b.scoped(name, op)?;
        self.nodes.push(NeckNode {
            name: name.to_string(),
            op,
            inputs,
            stride,
        });
        Ok(self.nodes.len() - 1)
    }
}

impl Neck {
    pub fn build<E: Element>(b: &mut Builder<'_, E>, spec: &NeckSpec) -> Result<Self> {
        let [c3, c4, c5] = spec.channels;
        let act = spec.act;
        let mut nb = NeckBuilder { b, nodes: Vec::new() };
        let p3 = nb.add("in3", 8, vec![], |_| Ok(NeckOp::Input(0)))?;
        let p4 = nb.add("in4", 16, vec![], |_| Ok(NeckOp::Input(1)))?;
        let p5 = nb.add("in5", 32, vec![], |_| Ok(NeckOp::Input(2)))?;
        let entry = match spec.kind {
            NeckKind::Sa => CspEntry::Unit(ConvKind::Gse1),
            _ => CspEntry::Pointwise,
        };
        let fuse = |cin: usize, cout: usize| {
            move |b: &mut Builder<'_, E>| {
                Ok(NeckOp::Fuse(CspBlock::build(b, cin, cout, spec.depth, entry, spec.body, false, act)?))
            }
        };
        let outputs = match spec.kind {
            NeckKind::None => [p3, p4, p5],
            NeckKind::Ihp => {
                let mut outs = [0; 3];
                for (l, (&input, &c)) in [p3, p4, p5].iter().zip(&spec.channels).enumerate() {
                    outs[l] = nb.add(&format!("filter{}", l + 3), PYRAMID_STRIDES[l], vec![input], |b| {
                        let stack = (0..spec.ihp_depth)
                            .map(|i| {
                                b.scoped(&format!("m{i}"), |b| {
                                    crate::blocks::Bottleneck::build(b, c, spec.body, true, act)
                                })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok(NeckOp::Filter(stack))
                    })?;
                }
                outs
            }
            NeckKind::Fpn | NeckKind::PanetSimplified | NeckKind::Sa => {
                let up = spec.upsample;
                let l5 = nb.add("lat5", 32, vec![p5], |b| {
                    Ok(NeckOp::Lateral(ConvBnAct::standard(b, c5, c4, 1, 1, act)?))
                })?;
                let u5 = nb.add("up5", 16, vec![l5], |_| Ok(NeckOp::Upsample { scale: 2, mode: up }))?;
                let cat4 = nb.add("cat4", 16, vec![u5, p4], |_| Ok(NeckOp::Concat))?;
                let n4 = nb.add("td4", 16, vec![cat4], fuse(2 * c4, c4))?;
                let l4 = nb.add("lat4", 16, vec![n4], |b| {
                    Ok(NeckOp::Lateral(ConvBnAct::standard(b, c4, c3, 1, 1, act)?))
                })?;
                let u4 = nb.add("up4", 8, vec![l4], |_| Ok(NeckOp::Upsample { scale: 2, mode: up }))?;
                let cat3 = nb.add("cat3", 8, vec![u4, p3], |_| Ok(NeckOp::Concat))?;
                let n3 = nb.add("td3", 8, vec![cat3], fuse(2 * c3, c3))?;
                if spec.kind == NeckKind::Fpn {
                    [n3, n4, p5]
                } else {
                    let down = spec.downsample;
                    let d3 = nb.add("down3", 16, vec![n3], |b| {
                        Ok(NeckOp::Downsample(Downsample::build(b, down, c3, c3, act)?))
                    })?;
                    let cat4b = nb.add("cat4b", 16, vec![d3, l4], |_| Ok(NeckOp::Concat))?;
                    let o4 = nb.add("bu4", 16, vec![cat4b], fuse(2 * c3, c4))?;
                    let d4 = nb.add("down4", 32, vec![o4], |b| {
                        Ok(NeckOp::Downsample(Downsample::build(b, down, c4, c4, act)?))
                    })?;
                    let cat5 = nb.add("cat5", 32, vec![d4, l5], |_| Ok(NeckOp::Concat))?;
                    let o5 = nb.add("bu5", 32, vec![cat5], fuse(2 * c4, c5))?;
                    [n3, o4, o5]
                }
            }
        };
        Ok(Neck {
            spec: spec.clone(),
            nodes: nb.nodes,
            outputs,
        })
    }

    /// Runs the neck and returns the value of every node.
    pub fn forward_all<E: Element>(&self, ctx: &mut Ctx<'_, E>, feats: &PyramidFeatures) -> Result<Vec<Var>> {
        if feats.levels.len() != 3 {
            return Err(Error::shape(
                "neck",
                format!("expected 3 pyramid levels, got {}", feats.levels.len()),
            ));
        }
        for (l, &(_, v)) in feats.levels.iter().enumerate() {
            let c = dims4(ctx.graph.shape(v), "neck")?[1];
            if c != self.spec.channels[l] {
                return Err(Error::shape(
                    "neck",
                    format!("P{} has {c} channels, neck expects {}", l + 3, self.spec.channels[l]),
                ));
            }
        }
        let mut values: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<Var> = node.inputs.iter().map(|&i| values[i]).collect();
            let v = ctx.scoped(&format!("neck/{}", node.name), |ctx| match &node.op {
                NeckOp::Input(l) => Ok(feats.levels[*l].1),
                NeckOp::Lateral(c) => c.forward(ctx, ins[0]),
                NeckOp::Upsample { scale, mode } => crate::blocks::upsample(&mut ctx.graph, ins[0], *scale, *mode),
                NeckOp::Downsample(d) => d.forward(ctx, ins[0]),
                NeckOp::Concat => ctx.graph.concat_channels(&ins),
                NeckOp::Fuse(c) => c.forward(ctx, ins[0]),
                NeckOp::Filter(stack) => {
                    let mut x = ins[0];
                    for m in stack {
                        x = m.forward(ctx, x)?;
                    }
                    Ok(x)
                }
            })?;
            values.push(v);
        }
        Ok(values)
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, feats: &PyramidFeatures) -> Result<PyramidFeatures> {
        let values = self.forward_all(ctx, feats)?;
        Ok(PyramidFeatures::new(
            self.outputs
                .iter()
                .zip(PYRAMID_STRIDES)
                .map(|(&o, s)| (s, values[o]))
                .collect(),
        ))
    }

    /// Edges whose endpoints sit at different strides.
    pub fn cross_level_edges(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.inputs.iter().filter(|&&i| self.nodes[i].stride != n.stride).count())
            .sum()
    }

    /// Concatenation nodes, i.e. points where two paths are fused.
    pub fn fusion_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, NeckOp::Concat)).count()
    }

    pub fn upsample_modes(&self) -> Vec<UpsampleMode> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                NeckOp::Upsample { mode, .. } => Some(mode),
                _ => None,
            })
            .collect()
    }

    pub fn downsamples(&self) -> Vec<&Downsample> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                NeckOp::Downsample(d) => Some(d),
                _ => None,
            })
            .collect()
    }

    pub fn out_channels(&self) -> [usize; 3] {
        self.spec.channels
    }

    /// One line per node: index, name, op, stride, inputs.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(
                s,
                "node={i} name={} op={} stride={} inputs={:?}",
                n.name,
                n.op.label(),
                n.stride,
                n.inputs
            );
        }
        let _ = writeln!(
            s,
            "neck={} fusion_nodes={} cross_level_edges={}",
            self.spec.kind.name(),
            self.fusion_nodes(),
            self.cross_level_edges()
        );
        s
    }
}
