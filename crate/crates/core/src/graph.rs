//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and `backward` walks it in reverse exactly once.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{
    self,
    batchnorm::{self, BnSaved},
    conv::{self, Conv2dConfig, ConvGeom},
    pool::{self, PoolConfig, PoolGeom, PoolSaved},
};
use crate::tensor::{dims4, Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator tag recorded on every node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool,
    AvgPool,
    NnInterpolate,
    Add,
    MulScalar,
    Silu,
    LeakyRelu,
    Concat,
    Slice,
    TileChannels,
    ChannelShuffle,
    BatchNorm,
    Sum,
    WeightedSum,
    Loss,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool => "max_pool",
            OpKind::AvgPool => "avg_pool",
            OpKind::NnInterpolate => "nn_interpolate",
            OpKind::Add => "add",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Silu => "silu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::TileChannels => "tile_channels",
            OpKind::ChannelShuffle => "channel_shuffle",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Sum => "sum",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::Loss => "loss",
        }
    }
}

pub const LEAKY_SLOPE: f64 = 0.1;

/// Statistics used by a batch-norm node.
#[derive(Clone, Debug)]
pub enum BnStats<'a> {
    /// Normalize by batch statistics; the computed (mean, biased var) are
    /// returned so the caller can update its running state.
    Batch,
    /// Normalize by the supplied running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

enum Op<E> {
    Leaf,
    Conv2d { geom: ConvGeom, has_bias: bool },
    Pool { geom: PoolGeom, saved: PoolSaved },
    NnInterpolate { scale: usize },
    Add,
    MulScalar(E),
    Silu,
    LeakyRelu,
    Concat { channels: Vec<usize> },
    Slice { start: usize, channels: usize },
    TileChannels { times: usize },
    Shuffle { perm: Vec<usize> },
    BatchNorm(BnSaved<E>),
    Sum,
    WeightedSum { weights: Vec<E> },
    /// Scalar whose gradient with respect to each input was computed during
    /// the forward pass.
    Precomputed { grads: Vec<Vec<E>> },
}

impl<E> Op<E> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Pool { geom, .. } => match geom.cfg.kind {
                pool::PoolKind::Max => OpKind::MaxPool,
                pool::PoolKind::Avg => OpKind::AvgPool,
            },
            Op::NnInterpolate { .. } => OpKind::NnInterpolate,
            Op::Add => OpKind::Add,
            Op::MulScalar(_) => OpKind::MulScalar,
            Op::Silu => OpKind::Silu,
            Op::LeakyRelu => OpKind::LeakyRelu,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::TileChannels { .. } => OpKind::TileChannels,
            Op::Shuffle { .. } => OpKind::ChannelShuffle,
            Op::BatchNorm(_) => OpKind::BatchNorm,
            Op::Sum => OpKind::Sum,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::Precomputed { .. } => OpKind::Loss,
        }
    }
}

struct Node<E> {
    shape: Vec<usize>,
    value: Vec<E>,
    op: Op<E>,
    inputs: Vec<Var>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
    scope: usize,
    flops: u64,
}

/// Summary of one recorded node, for audits and cost accounting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeInfo {
    pub kind: OpKind,
    pub shape: Vec<usize>,
    pub inputs: Vec<Var>,
    pub scope: String,
    pub flops: u64,
}

pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    scopes: Vec<String>,
    scope_stack: Vec<usize>,
    check_finite: bool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> fmt::Debug for Graph<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            scopes: vec![String::new()],
            scope_stack: vec![0],
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Turns the per-op finiteness assertion on or off.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Enters a named scope; nodes created until the matching `pop_scope`
    /// are tagged `parent/name`.
    pub fn push_scope(&mut self, name: &str) {
        let parent = &self.scopes[*self.scope_stack.last().expect("root scope")];
        let full = if parent.is_empty() {
            name.to_string()
        } else {
            format!("{parent}/{name}")
        };
        let id = match self.scopes.iter().position(|s| *s == full) {
            Some(id) => id,
            None => {
                self.scopes.push(full);
                self.scopes.len() - 1
            }
        };
        self.scope_stack.push(id);
    }

    pub fn pop_scope(&mut self) {
        if self.scope_stack.len() > 1 {
            self.scope_stack.pop();
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<E>, op: Op<E>, inputs: Vec<Var>, flops: u64) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.check_finite && !matches!(op, Op::Leaf) && !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("output of {}", op.kind().name())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            inputs,
            requires_grad,
            grad: None,
            scope: *self.scope_stack.last().expect("root scope"),
            flops,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf holding a copy of `t`'s values; `t.requires_grad()`
    /// decides whether the leaf receives a gradient.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Var {
        self.leaf_from_parts(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a leaf that takes ownership of `t`'s buffer.
    pub fn leaf_owned(&mut self, t: Tensor<E>) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.leaf_from_parts(shape, t.into_data(), rg)
    }

    fn leaf_from_parts(&mut self, shape: Vec<usize>, value: Vec<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
            grad: None,
            scope: *self.scope_stack.last().expect("root scope"),
            flops: 0,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<E> {
        let node = &self.nodes[v.0];
        Tensor::from_vec(&node.shape, node.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn info(&self) -> Vec<NodeInfo> {
        self.nodes
            .iter()
            .map(|n| NodeInfo {
                kind: n.op.kind(),
                shape: n.shape.clone(),
                inputs: n.inputs.clone(),
                scope: self.scopes[n.scope].clone(),
                flops: n.flops,
            })
            .collect()
    }

    pub fn total_flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        dims4(&self.nodes[v.0].shape, op)
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, cfg: Conv2dConfig) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(weight), cfg)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match Cout={}", self.shape(b), geom.cout),
                ));
            }
        }
        let out = conv::forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(
            geom.out_shape().to_vec(),
            out,
            Op::Conv2d {
                geom,
                has_bias: bias.is_some(),
            },
            inputs,
            geom.flops(),
        )
    }

    pub fn pool2d(&mut self, x: Var, cfg: PoolConfig) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(x), cfg)?;
        let (out, saved) = pool::forward(self.value(x), &geom)?;
        let flops = out.len() as u64;
        self.push(geom.out_shape().to_vec(), out, Op::Pool { geom, saved }, vec![x], flops)
    }

    pub fn nn_interpolate(&mut self, x: Var, scale: usize) -> Result<Var> {
        if scale < 1 {
            return Err(Error::config("nn_interpolate scale must be at least 1"));
        }
        let [n, c, h, w] = self.dims4(x, "nn_interpolate")?;
        let out = kernels::nn_interpolate(self.value(x), n * c, h, w, scale);
        let flops = out.len() as u64;
        self.push(vec![n, c, h * scale, w * scale], out, Op::NnInterpolate { scale }, vec![x], flops)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<E> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let flops = out.len() as u64;
        self.push(self.shape(a).to_vec(), out, Op::Add, vec![a, b], flops)
    }

    pub fn mul_scalar(&mut self, x: Var, k: E) -> Result<Var> {
        let out: Vec<E> = self.value(x).iter().map(|&v| v * k).collect();
        let flops = out.len() as u64;
        self.push(self.shape(x).to_vec(), out, Op::MulScalar(k), vec![x], flops)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<E> = self
            .value(x)
            .iter()
            .map(|&v| E::of(v.f64() * kernels::sigmoid(v.f64())))
            .collect();
        let flops = out.len() as u64;
        self.push(self.shape(x).to_vec(), out, Op::Silu, vec![x], flops)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        let slope = E::of(LEAKY_SLOPE);
        let out: Vec<E> = self
            .value(x)
            .iter()
            .map(|&v| if v > E::zero() { v } else { v * slope })
            .collect();
        let flops = out.len() as u64;
        self.push(self.shape(x).to_vec(), out, Op::LeakyRelu, vec![x], flops)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::usage("concat_channels needs at least one input"))?;
        let [n, _, h, w] = self.dims4(first, "concat_channels")?;
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let [ni, ci, hi, wi] = self.dims4(x, "concat_channels")?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("input {:?} does not share N,H,W with {:?}", self.shape(x), self.shape(first)),
                ));
            }
            channels.push(ci);
        }
        let parts: Vec<&[E]> = xs.iter().map(|&x| self.value(x)).collect();
        let out = kernels::concat_channels(&parts, &channels, n, h * w);
        let total = channels.iter().sum();
        self.push(vec![n, total, h, w], out, Op::Concat { channels }, xs.to_vec(), 0)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "slice_channels")?;
        if start + len > c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let out = kernels::slice_channels(self.value(x), n, c, h * w, start, len);
        self.push(vec![n, len, h, w], out, Op::Slice { start, channels: len }, vec![x], 0)
    }

    /// Repeats the channel block `times` times: `[N, C, H, W] -> [N, times·C, H, W]`.
    pub fn tile_channels(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::config("tile_channels needs times >= 1"));
        }
        let [n, c, h, w] = self.dims4(x, "tile_channels")?;
        let out = kernels::tile_channels(self.value(x), n, c, h * w, times);
        self.push(vec![n, c * times, h, w], out, Op::TileChannels { times }, vec![x], 0)
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "channel_shuffle")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!(
                "channel_shuffle: {c} channels not divisible into {groups} groups"
            )));
        }
        let perm = kernels::shuffle_permutation(c, groups);
        let out = kernels::gather_channels(self.value(x), n, h * w, &perm);
        self.push(vec![n, c, h, w], out, Op::Shuffle { perm }, vec![x], 0)
    }

    /// Batch normalization over `[N, C, H, W]`. In batch mode the returned
    /// statistics are the (mean, biased variance) used for normalization.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let [n, c, h, w] = self.dims4(x, "batchnorm2d")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batchnorm2d",
                format!(
                    "gamma {:?} / beta {:?} do not match {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let hw = h * w;
        let (mean, var, batch) = match stats {
            BnStats::Batch => {
                if n * hw == 0 {
                    return Err(Error::config("batchnorm2d over an empty batch"));
                }
                let (m, v) = batchnorm::batch_stats(self.value(x), n, c, hw);
                (m, v, true)
            }
            BnStats::Running { mean, var } => (mean.to_vec(), var.to_vec(), false),
        };
        let (out, saved) = batchnorm::normalize(
            self.value(x),
            n,
            c,
            hw,
            &mean,
            &var,
            self.value(gamma),
            self.value(beta),
            batch,
        );
        let flops = 2 * out.len() as u64;
        let v = self.push(vec![n, c, h, w], out, Op::BatchNorm(saved), vec![x, gamma, beta], flops)?;
        Ok((v, batch.then_some((mean, var))))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum::<E>();
        self.push(Vec::new(), vec![s], Op::Sum, vec![x], 0)
    }

    /// `Σ x ⊙ weights`, a scalar with a non-uniform upstream gradient.
    pub fn weighted_sum(&mut self, x: Var, weights: &[E]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), self.value(x).len()),
            ));
        }
        let s = self
            .value(x)
            .iter()
            .zip(weights)
            .map(|(&a, &b)| a * b)
            .sum::<E>();
        self.push(Vec::new(), vec![s], Op::WeightedSum { weights: weights.to_vec() }, vec![x], 0)
    }

    /// Records a scalar computed outside the graph together with its
    /// gradient with respect to each input.
    pub fn precomputed_scalar(&mut self, inputs: &[Var], value: E, grads: Vec<Vec<E>>) -> Result<Var> {
        if grads.len() != inputs.len()
            || inputs
                .iter()
                .zip(&grads)
                .any(|(&v, g)| g.len() != self.value(v).len())
        {
            return Err(Error::usage("precomputed gradients do not match inputs"));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.push(Vec::new(), vec![value], Op::Precomputed { grads }, inputs.to_vec(), 0)
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `d loss / d leaf` into every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::usage(
                "loss is not connected to any leaf that requires a gradient",
            ));
        }
        let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                let slot = &mut self.nodes[i].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => *slot = Some(g),
                }
                continue;
            }
            let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = self.node_backward(i, &g, &need);
            let inputs = self.nodes[i].inputs.clone();
            for ((v, ig), needed) in inputs.into_iter().zip(input_grads).zip(need) {
                let Some(ig) = ig else { continue };
                if !needed {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[E], need: &[bool]) -> Vec<Option<Vec<E>>> {
        let node = &self.nodes[i];
        let input = |k: usize| &self.nodes[node.inputs[k].0];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { geom, has_bias } => {
                let grads = conv::backward(
                    &input(0).value,
                    &input(1).value,
                    g,
                    geom,
                    [need[0], need[1], *has_bias && need[2]],
                );
                let mut out = vec![grads.dx, grads.dweight];
                if *has_bias {
                    out.push(grads.dbias);
                }
                out
            }
            Op::Pool { geom, saved } => vec![Some(pool::backward(g, saved, geom))],
            Op::NnInterpolate { scale } => {
                let [n, c, h, w] = dims4(&input(0).shape, "nn_interpolate").expect("4-d");
                vec![Some(kernels::nn_interpolate_backward(g, n * c, h, w, *scale))]
            }
            Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::MulScalar(k) => vec![Some(g.iter().map(|&v| v * *k).collect())],
            Op::Silu => {
                let x = &input(0).value;
                vec![Some(
                    x.iter()
                        .zip(g)
                        .map(|(&xv, &gv)| {
                            let xf = xv.f64();
                            let s = kernels::sigmoid(xf);
                            gv * E::of(s * (1.0 + xf * (1.0 - s)))
                        })
                        .collect(),
                )]
            }
            Op::LeakyRelu => {
                let x = &input(0).value;
                let slope = E::of(LEAKY_SLOPE);
                vec![Some(
                    x.iter()
                        .zip(g)
                        .map(|(&xv, &gv)| if xv > E::zero() { gv } else { gv * slope })
                        .collect(),
                )]
            }
            Op::Concat { channels } => {
                let [n, _, h, w] = dims4(&node.shape, "concat").expect("4-d");
                let total: usize = channels.iter().sum();
                let mut start = 0;
                channels
                    .iter()
                    .map(|&c| {
                        let part = kernels::slice_channels(g, n, total, h * w, start, c);
                        start += c;
                        Some(part)
                    })
                    .collect()
            }
            Op::Slice { start, channels } => {
                let [n, c, h, w] = dims4(&input(0).shape, "slice").expect("4-d");
                let hw = h * w;
                let mut dx = vec![E::zero(); n * c * hw];
                for b in 0..n {
                    dx[(b * c + start) * hw..(b * c + start + channels) * hw]
                        .copy_from_slice(&g[b * channels * hw..(b + 1) * channels * hw]);
                }
                vec![Some(dx)]
            }
            Op::TileChannels { times } => {
                let [n, c, h, w] = dims4(&input(0).shape, "tile").expect("4-d");
                vec![Some(kernels::tile_channels_backward(g, n, c, h * w, *times))]
            }
            Op::Shuffle { perm } => {
                let [n, _, h, w] = dims4(&node.shape, "shuffle").expect("4-d");
                vec![Some(kernels::scatter_channels(g, n, h * w, perm))]
            }
            Op::BatchNorm(saved) => {
                let [n, c, h, w] = dims4(&node.shape, "batchnorm").expect("4-d");
                let grads = batchnorm::backward(g, saved, &input(1).value, n, c, h * w);
                vec![Some(grads.dx), Some(grads.dgamma), Some(grads.dbeta)]
            }
            Op::Sum => vec![Some(vec![g[0]; input(0).value.len()])],
            Op::WeightedSum { weights } => vec![Some(weights.iter().map(|&w| w * g[0]).collect())],
            Op::Precomputed { grads } => grads
                .iter()
                .map(|gr| Some(gr.iter().map(|&v| v * g[0]).collect()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn sum_of_doubled_input() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]).with_requires_grad(true));
        let y = g.mul_scalar(x, 2.0).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 6]);
    }

    #[test]
    fn conv_one_by_one_grad_is_weight() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[1, 1, 3, 3], &[0.3; 9]).with_requires_grad(true));
        let w = g.leaf(&t(&[1, 1, 1, 1], &[-1.5]));
        let y = g.conv2d(x, w, None, Conv2dConfig::default()).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-1.5; 9]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2], &[1., 2.]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_rejects_disconnected_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2], &[1., 2.]));
        let s = g.sum(x).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[1, 1, 1, 2], &[1., 2.]).with_requires_grad(true));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 2.]);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&t(&[1, 2], &[1., 2.]));
        let b = g.leaf(&t(&[1, 2], &[3., 4.]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c), &[4., 6.]);
        let d = g.leaf(&t(&[1, 2], &[2., 4.]));
        let e = g.mul_scalar(d, 0.25).unwrap();
        assert_eq!(g.value(e), &[0.5, 1.0]);
        let bad = g.leaf(&t(&[2, 1], &[2., 4.]));
        assert!(matches!(g.add(a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&t(&[1, 1, 1, 1], &[5.]));
        let b = g.leaf(&t(&[1, 2, 1, 1], &[6., 7.]));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c), &[5., 6., 7.]);
        let single = g.concat_channels(&[b]).unwrap();
        assert_eq!(g.value(single), g.value(b));
        let wide = g.leaf(&t(&[1, 1, 1, 2], &[1., 2.]));
        assert!(matches!(g.concat_channels(&[a, wide]), Err(Error::Shape { .. })));
    }

    #[test]
    fn interpolate_rejects_zero_scale() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&t(&[1, 1, 1, 1], &[5.]));
        assert!(matches!(g.nn_interpolate(a, 0), Err(Error::Config(_))));
        let same = g.nn_interpolate(a, 1).unwrap();
        assert_eq!(g.value(same), &[5.]);
    }

    #[test]
    fn batchnorm_gamma_zero_gives_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2, 2, 1, 2], &[1., 5., -2., 3., 0.5, 8., 4., -1.]));
        let gamma = g.leaf(&t(&[2], &[0., 0.]));
        let beta = g.leaf(&t(&[2], &[0.7, -0.2]));
        let (y, stats) = g.batchnorm2d(x, gamma, beta, BnStats::Batch).unwrap();
        assert!(stats.is_some());
        let v = g.value(y);
        assert_eq!(v, &[0.7, 0.7, -0.2, -0.2, 0.7, 0.7, -0.2, -0.2]);
    }

    #[test]
    fn batchnorm_standardized_input_passes_through() {
        // per-channel mean 0, biased variance 1
        let data = [1., -1., 1., -1., -1., 1., -1., 1.];
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2, 1, 2, 2], &data));
        let gamma = g.leaf(&t(&[1], &[1.]));
        let beta = g.leaf(&t(&[1], &[0.]));
        let (y, _) = g.batchnorm2d(x, gamma, beta, BnStats::Batch).unwrap();
        for (a, b) in g.value(y).iter().zip(data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_rejects_empty_batch() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::zeros(&[0, 2, 2, 2]));
        let gamma = g.leaf(&t(&[2], &[1., 1.]));
        let beta = g.leaf(&t(&[2], &[0., 0.]));
        assert!(matches!(
            g.batchnorm2d(x, gamma, beta, BnStats::Batch),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scopes_nest() {
        let mut g = Graph::<f64>::new();
        g.push_scope("neck");
        g.push_scope("up");
        let a = g.leaf(&t(&[1], &[1.]));
        g.pop_scope();
        g.pop_scope();
        assert_eq!(g.info()[a.index()].scope, "neck/up");
    }
}
