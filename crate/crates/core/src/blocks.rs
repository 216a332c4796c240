//! Differentiable building blocks: conv units, soft nearest-neighbour
//! upsampling, extended-window downsampling, GSConv and its two extensions,
//! bottlenecks, and the CSP/SPP stand-ins used by backbones and necks.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::conv::Conv2dConfig;
use crate::kernels::pool::{PoolConfig, PoolKind};
use crate::params::{Builder, BufferId, Ctx, ParamId};
use crate::tensor::{dims4, Element};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Silu,
    LeakyRelu,
    Identity,
}

impl Activation {
    pub fn apply<E: Element>(self, g: &mut Graph<E>, x: Var) -> Result<Var> {
        match self {
            Activation::Silu => g.silu(x),
            Activation::LeakyRelu => g.leaky_relu(x),
            Activation::Identity => Ok(x),
        }
    }
}

// ------------------------------------------------------------------ SNI

/// How the soft factor is derived from the zoom factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AlphaMode {
    /// Ratio of areas, `1 / scale²`.
    Area,
    /// Ratio of side lengths, `1 / scale`. Kept for ablations.
    Linear,
}

/// Zoom factor and soft factor of one soft nearest-neighbour upsample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpsampleSpec {
    pub scale: usize,
    pub alpha: f64,
}

impl UpsampleSpec {
    pub fn new(scale: usize, mode: AlphaMode) -> Result<Self> {
        if scale < 1 {
            return Err(Error::config("upsample scale must be at least 1"));
        }
        let alpha = match mode {
            AlphaMode::Area => Self::resolution_ratio(1, 1, scale, scale),
            AlphaMode::Linear => 1.0 / scale as f64,
        };
        Ok(UpsampleSpec { scale, alpha })
    }

    /// Input resolution over output resolution, each measured as width × height.
    pub fn resolution_ratio(h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> f64 {
        (h_in * w_in) as f64 / (h_out * w_out) as f64
    }
}

/// `alpha · nn_interpolate(x, scale)`.
pub fn sni_upsample<E: Element>(g: &mut Graph<E>, x: Var, spec: UpsampleSpec) -> Result<Var> {
    let up = g.nn_interpolate(x, spec.scale)?;
    g.mul_scalar(up, E::of(spec.alpha))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpsampleMode {
    HardNn,
    Sni(AlphaMode),
}

pub fn upsample<E: Element>(g: &mut Graph<E>, x: Var, scale: usize, mode: UpsampleMode) -> Result<Var> {
    match mode {
        UpsampleMode::HardNn => g.nn_interpolate(x, scale),
        UpsampleMode::Sni(alpha) => sni_upsample(g, x, UpsampleSpec::new(scale, alpha)?),
    }
}

// ----------------------------------------------------------- conv units

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cfg: Conv2dConfig,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    pub fn build<E: Element>(
        b: &mut Builder<'_, E>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::config(format!(
                "conv {cin}->{cout} cannot be split into {groups} groups"
            )));
        }
        let weight = b.conv_weight("weight", [cout, cin / groups, k, k]);
        let bias = bias.then(|| b.constant("bias", &[cout], 0.0));
        Ok(Conv {
            weight,
            bias,
            cfg: Conv2dConfig::new(stride, k / 2, groups),
            cin,
            cout,
            k,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let bias = self.bias.map(|b| ctx.param(b));
        ctx.graph.conv2d(x, w, bias, self.cfg)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: BufferId,
    pub var: BufferId,
}

impl BatchNorm {
    pub fn build<E: Element>(b: &mut Builder<'_, E>, c: usize) -> Self {
        BatchNorm {
            gamma: b.constant("gamma", &[c], 1.0),
            beta: b.constant("beta", &[c], 0.0),
            mean: b.buffer("running_mean", vec![0.0; c]),
            var: b.buffer("running_var", vec![1.0; c]),
        }
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        ctx.batchnorm(x, self.gamma, self.beta, self.mean, self.var)
    }
}

/// Convolution, optional batch norm, activation. The convolution carries a
/// bias only when no batch norm follows it.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
    pub act: Activation,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn build<E: Element>(
        b: &mut Builder<'_, E>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        with_bn: bool,
        act: Activation,
    ) -> Result<Self> {
        let conv = b.scoped("conv", |b| Conv::build(b, cin, cout, k, stride, groups, !with_bn))?;
        let bn = with_bn.then(|| b.scoped("bn", |b| BatchNorm::build(b, cout)));
        Ok(ConvBnAct { conv, bn, act })
    }

    /// Dense `k×k` conv + BN + activation.
    pub fn standard<E: Element>(
        b: &mut Builder<'_, E>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        act: Activation,
    ) -> Result<Self> {
        Self::build(b, cin, cout, k, stride, 1, true, act)
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(ctx, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(ctx, y)?;
        }
        self.act.apply(&mut ctx.graph, y)
    }

    pub fn cout(&self) -> usize {
        self.conv.cout
    }
}

// --------------------------------------------------------------- GSConv

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GsVariant {
    /// 3×3 dense + 5×5 depthwise, both with BN.
    Base,
    /// Auxiliary branch is pointwise (dense) then 5×5 depthwise (sparse),
    /// with no batch norm.
    E1,
    /// Three depthwise auxiliary branches with 9, 13 and 17 kernels.
    E2,
}

/// Which tensor feeds the auxiliary branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum BranchSource {
    #[default]
    Main,
    Input,
}

pub const GSE2_KERNELS: [usize; 3] = [9, 13, 17];

#[derive(Clone, Debug)]
pub struct AuxBranch {
    pub pointwise: Option<ConvBnAct>,
    pub depthwise: ConvBnAct,
}

#[derive(Clone, Debug)]
pub struct GsConv {
    pub variant: GsVariant,
    pub source: BranchSource,
    pub main: ConvBnAct,
    pub aux: Vec<AuxBranch>,
    pub shuffle_groups: usize,
    pub cout: usize,
}

impl GsConv {
    pub fn build<E: Element>(
        b: &mut Builder<'_, E>,
        variant: GsVariant,
        cin: usize,
        cout: usize,
        source: BranchSource,
        act: Activation,
    ) -> Result<Self> {
        let parts = match variant {
            GsVariant::Base | GsVariant::E1 => 2,
            GsVariant::E2 => 4,
        };
        if cout == 0 || cout % parts != 0 {
            return Err(Error::config(format!(
                "{variant:?} needs output channels divisible by {parts}, got {cout}"
            )));
        }
        let cpart = cout / parts;
        let aux_in = match source {
            BranchSource::Main => cpart,
            BranchSource::Input => cin,
        };
        let main = b.scoped("main", |b| ConvBnAct::standard(b, cin, cpart, 3, 1, act))?;
        let depthwise_from = |b: &mut Builder<'_, E>, k: usize, with_bn: bool| {
            if cpart % aux_in != 0 {
                return Err(Error::config(format!(
                    "depthwise branch cannot map {aux_in} channels to {cpart}"
                )));
            }
            ConvBnAct::build(b, aux_in, cpart, k, 1, aux_in, with_bn, act)
        };
        let aux = match variant {
            GsVariant::Base => vec![b.scoped("aux0", |b| {
                Ok::<_, Error>(AuxBranch {
                    pointwise: None,
                    depthwise: b.scoped("dw", |b| depthwise_from(b, 5, true))?,
                })
            })?],
            GsVariant::E1 => vec![b.scoped("aux0", |b| {
                let pw = b.scoped("pw", |b| {
                    ConvBnAct::build(b, aux_in, cpart, 1, 1, 1, false, Activation::Identity)
                })?;
                let dw = b.scoped("dw", |b| ConvBnAct::build(b, cpart, cpart, 5, 1, cpart, false, act))?;
                Ok::<_, Error>(AuxBranch {
                    pointwise: Some(pw),
                    depthwise: dw,
                })
            })?],
            GsVariant::E2 => GSE2_KERNELS
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    b.scoped(&format!("aux{i}"), |b| {
                        Ok(AuxBranch {
                            pointwise: None,
                            depthwise: b.scoped("dw", |b| depthwise_from(b, k, false))?,
                        })
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(GsConv {
            variant,
            source,
            main,
            aux,
            shuffle_groups: parts,
            cout,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let main = ctx.scoped("main", |ctx| self.main.forward(ctx, x))?;
        let src = match self.source {
            BranchSource::Main => main,
            BranchSource::Input => x,
        };
        let mut parts = vec![main];
        for (i, branch) in self.aux.iter().enumerate() {
            let y = ctx.scoped(&format!("aux{i}"), |ctx| {
                let mut y = src;
                if let Some(pw) = &branch.pointwise {
                    y = pw.forward(ctx, y)?;
                }
                branch.depthwise.forward(ctx, y)
            })?;
            parts.push(y);
        }
        let cat = ctx.graph.concat_channels(&parts)?;
        ctx.graph.channel_shuffle(cat, self.shuffle_groups)
    }

    /// Kernel sizes of the depthwise auxiliary convolutions.
    pub fn depthwise_kernels(&self) -> Vec<usize> {
        self.aux.iter().map(|a| a.depthwise.conv.k).collect()
    }

    /// Whether any auxiliary branch carries batch norm.
    pub fn aux_has_bn(&self) -> bool {
        self.aux
            .iter()
            .any(|a| a.depthwise.bn.is_some() || a.pointwise.as_ref().is_some_and(|p| p.bn.is_some()))
    }
}

/// Selectable implementation of a stride-1 3×3 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvKind {
    Plain,
    GsConv,
    Gse1,
    Gse2,
}

#[derive(Clone, Debug)]
pub enum ConvUnit {
    Plain(ConvBnAct),
    Gs(GsConv),
}

impl ConvUnit {
    pub fn build<E: Element>(
        b: &mut Builder<'_, E>,
        kind: ConvKind,
        cin: usize,
        cout: usize,
        source: BranchSource,
        act: Activation,
    ) -> Result<Self> {
        Ok(match kind {
            ConvKind::Plain => ConvUnit::Plain(ConvBnAct::standard(b, cin, cout, 3, 1, act)?),
            ConvKind::GsConv => ConvUnit::Gs(GsConv::build(b, GsVariant::Base, cin, cout, source, act)?),
            ConvKind::Gse1 => ConvUnit::Gs(GsConv::build(b, GsVariant::E1, cin, cout, source, act)?),
            ConvKind::Gse2 => ConvUnit::Gs(GsConv::build(b, GsVariant::E2, cin, cout, source, act)?),
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        match self {
            ConvUnit::Plain(c) => c.forward(ctx, x),
            ConvUnit::Gs(c) => c.forward(ctx, x),
        }
    }
}

// ------------------------------------------------------------------ ESD

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EsdVariant {
    /// Element-wise sum of the conv branch and both pool branches.
    I,
    /// Concatenation followed by a learnable pointwise fusion.
    II,
}

/// Pool windows of the two parameter-free branches. Windows must be even so
/// that padding `(k − 2) / 2` halves even inputs exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EsdWindows {
    pub max_k: usize,
    pub avg_k: usize,
}

impl Default for EsdWindows {
    fn default() -> Self {
        EsdWindows { max_k: 4, avg_k: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct Esd {
    pub variant: EsdVariant,
    pub conv: ConvBnAct,
    pub windows: EsdWindows,
    pub tile: usize,
    pub fuse: Option<ConvBnAct>,
    pub cin: usize,
    pub cout: usize,
}

fn pool_for_halving(kind: PoolKind, k: usize) -> Result<PoolConfig> {
    if k < 2 || k % 2 != 0 {
        return Err(Error::config(format!("ESD pool window must be even and >= 2, got {k}")));
    }
    Ok(PoolConfig::new(kind, k, 2, (k - 2) / 2))
}

impl Esd {
    pub fn build<E: Element>(
        b: &mut Builder<'_, E>,
        variant: EsdVariant,
        cin: usize,
        cout: usize,
        windows: EsdWindows,
        act: Activation,
    ) -> Result<Self> {
        pool_for_halving(PoolKind::Max, windows.max_k)?;
        pool_for_halving(PoolKind::Avg, windows.avg_k)?;
        let tile = match variant {
            EsdVariant::I => {
                if windows.max_k != windows.avg_k {
                    return Err(Error::config(
                        "ESD-I pool branches must share one window size",
                    ));
                }
                if cin == 0 || cout % cin != 0 || cout < cin {
                    return Err(Error::config(format!(
                        "ESD-I needs Cout to be a positive multiple of Cin, got {cin}->{cout}"
                    )));
                }
                cout / cin
            }
            EsdVariant::II => 1,
        };
        let conv = b.scoped("conv", |b| ConvBnAct::standard(b, cin, cout, 3, 2, act))?;
        let fuse = match variant {
            EsdVariant::I => None,
            EsdVariant::II => Some(b.scoped("fuse", |b| ConvBnAct::standard(b, cout + 2 * cin, cout, 1, 1, act))?),
        };
        Ok(Esd {
            variant,
            conv,
            windows,
            tile,
            fuse,
            cin,
            cout,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let [_, _, h, w] = dims4(ctx.graph.shape(x), "esd")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("ESD needs even spatial extents, got {h}x{w}")));
        }
        let c = ctx.scoped("conv", |ctx| self.conv.forward(ctx, x))?;
        let mx = ctx.graph.pool2d(x, pool_for_halving(PoolKind::Max, self.windows.max_k)?)?;
        let av = ctx.graph.pool2d(x, pool_for_halving(PoolKind::Avg, self.windows.avg_k)?)?;
        match &self.fuse {
            None => {
                let (mx, av) = if self.tile > 1 {
                    (ctx.graph.tile_channels(mx, self.tile)?, ctx.graph.tile_channels(av, self.tile)?)
                } else {
                    (mx, av)
                };
                let s = ctx.graph.add(c, mx)?;
                ctx.graph.add(s, av)
            }
            Some(fuse) => {
                let cat = ctx.graph.concat_channels(&[c, mx, av])?;
                ctx.scoped("fuse", |ctx| fuse.forward(ctx, cat))
            }
        }
    }
}

/// Selectable stride-2 downsampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DownsampleMode {
    StridedConv,
    Esd1,
    Esd2,
}

#[derive(Clone, Debug)]
pub enum Downsample {
    Conv(ConvBnAct),
    Esd(Esd),
}

impl Downsample {
    pub fn build<E: Element>(
        b: &mut Builder<'_, E>,
        mode: DownsampleMode,
        cin: usize,
        cout: usize,
        act: Activation,
    ) -> Result<Self> {
        Ok(match mode {
            DownsampleMode::StridedConv => Downsample::Conv(ConvBnAct::standard(b, cin, cout, 3, 2, act)?),
            DownsampleMode::Esd1 => Downsample::Esd(Esd::build(b, EsdVariant::I, cin, cout, EsdWindows::default(), act)?),
            DownsampleMode::Esd2 => Downsample::Esd(Esd::build(b, EsdVariant::II, cin, cout, EsdWindows::default(), act)?),
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        match self {
            Downsample::Conv(c) => c.forward(ctx, x),
            Downsample::Esd(e) => e.forward(ctx, x),
        }
    }

    pub fn is_esd(&self) -> bool {
        matches!(self, Downsample::Esd(_))
    }
}

// ----------------------------------------------------------- bottleneck

/// 1×1 reduce to C/2, 3×3 body, 1×1 expand back to C, optional residual.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: ConvBnAct,
    pub body: ConvUnit,
    pub expand: ConvBnAct,
    pub residual: bool,
}

impl Bottleneck {
    pub fn build<E: Element>(
        b: &mut Builder<'_, E>,
        c: usize,
        body: ConvKind,
        residual: bool,
        act: Activation,
    ) -> Result<Self> {
        if c < 2 || c % 2 != 0 {
            return Err(Error::config(format!("bottleneck needs an even channel count, got {c}")));
        }
        let h = c / 2;
        Ok(Bottleneck {
            reduce: b.scoped("reduce", |b| ConvBnAct::standard(b, c, h, 1, 1, act))?,
            body: b.scoped("body", |b| ConvUnit::build(b, body, h, h, BranchSource::Main, act))?,
            expand: b.scoped("expand", |b| ConvBnAct::standard(b, h, c, 1, 1, act))?,
            residual,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(ctx, x)?;
        let y = self.body.forward(ctx, y)?;
        let y = self.expand.forward(ctx, y)?;
        if self.residual {
            ctx.graph.add(x, y)
        } else {
            Ok(y)
        }
    }
}

// ------------------------------------------------------- CSP and SPP

/// First convolution of a CSP block's bottleneck branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CspEntry {
    Pointwise,
    Unit(ConvKind),
}

/// Two-branch CSP block: one branch runs `n` bottlenecks, the other is a
/// pointwise shortcut; the halves are concatenated and fused pointwise.
#[derive(Clone, Debug)]
pub struct CspBlock {
    pub entry: ConvUnit,
    pub shortcut: ConvBnAct,
    pub bottlenecks: Vec<Bottleneck>,
    pub fuse: ConvBnAct,
}

impl CspBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn build<E: Element>(
        b: &mut Builder<'_, E>,
        cin: usize,
        cout: usize,
        n: usize,
        entry: CspEntry,
        body: ConvKind,
        residual: bool,
        act: Activation,
    ) -> Result<Self> {
        if cout < 4 || cout % 4 != 0 {
            return Err(Error::config(format!("CSP block needs Cout divisible by 4, got {cout}")));
        }
        let h = cout / 2;
        let entry = b.scoped("entry", |b| match entry {
            CspEntry::Pointwise => Ok(ConvUnit::Plain(ConvBnAct::standard(b, cin, h, 1, 1, act)?)),
            CspEntry::Unit(kind) => ConvUnit::build(b, kind, cin, h, BranchSource::Main, act),
        })?;
        let shortcut = b.scoped("shortcut", |b| ConvBnAct::standard(b, cin, h, 1, 1, act))?;
        let bottlenecks = (0..n)
            .map(|i| b.scoped(&format!("m{i}"), |b| Bottleneck::build(b, h, body, residual, act)))
            .collect::<Result<Vec<_>>>()?;
        let fuse = b.scoped("fuse", |b| ConvBnAct::standard(b, 2 * h, cout, 1, 1, act))?;
        Ok(CspBlock {
            entry,
            shortcut,
            bottlenecks,
            fuse,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let mut a = self.entry.forward(ctx, x)?;
        for m in &self.bottlenecks {
            a = m.forward(ctx, a)?;
        }
        let s = self.shortcut.forward(ctx, x)?;
        let cat = ctx.graph.concat_channels(&[a, s])?;
        self.fuse.forward(ctx, cat)
    }
}

/// Spatial pyramid pooling: pointwise reduce, parallel stride-1 max pools
/// (5, 9, 13), concat with the reduced map, pointwise fuse.
#[derive(Clone, Debug)]
pub struct Spp {
    pub reduce: ConvBnAct,
    pub fuse: ConvBnAct,
    pub kernels: [usize; 3],
}

impl Spp {
    pub fn build<E: Element>(b: &mut Builder<'_, E>, c: usize, act: Activation) -> Result<Self> {
        if c < 2 || c % 2 != 0 {
            return Err(Error::config(format!("SPP needs an even channel count, got {c}")));
        }
        let h = c / 2;
        Ok(Spp {
            reduce: b.scoped("reduce", |b| ConvBnAct::standard(b, c, h, 1, 1, act))?,
            fuse: b.scoped("fuse", |b| ConvBnAct::standard(b, 4 * h, c, 1, 1, act))?,
            kernels: [5, 9, 13],
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let r = self.reduce.forward(ctx, x)?;
        let mut parts = vec![r];
        for &k in &self.kernels {
            parts.push(ctx.graph.pool2d(r, PoolConfig::new(PoolKind::Max, k, 1, k / 2))?);
        }
        let cat = ctx.graph.concat_channels(&parts)?;
        self.fuse.forward(ctx, cat)
    }
}
