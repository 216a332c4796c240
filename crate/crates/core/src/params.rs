//! Named parameter and buffer storage, plus the per-forward context that
//! binds stored tensors into an autodiff graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{BnStats, Graph, Var};
use crate::kernels::batchnorm::BN_MOMENTUM;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

/// Learnable tensors and non-learnable state (batch-norm running
/// statistics), each with a hierarchical name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Element> {
    params: Vec<Tensor<E>>,
    param_names: Vec<String>,
    buffers: Vec<Vec<f64>>,
    buffer_names: Vec<String>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            param_names: Vec::new(),
            buffers: Vec::new(),
            buffer_names: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: String, t: Tensor<E>) -> ParamId {
        self.params.push(t.with_requires_grad(true));
        self.param_names.push(name);
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: String, values: Vec<f64>) -> BufferId {
        self.buffers.push(values);
        self.buffer_names.push(name);
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Tensor<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn buffer(&self, id: BufferId) -> &[f64] {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Vec<f64> {
        &mut self.buffers[id.0]
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    /// Total learnable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Learnable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .zip(&self.param_names)
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(t, _)| t.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.clear_grad();
        }
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            params: self.params.iter().map(Tensor::cast).collect(),
            param_names: self.param_names.clone(),
            buffers: self.buffers.clone(),
            buffer_names: self.buffer_names.clone(),
        }
    }
}

/// Allocates and initializes parameters under a name prefix.
pub struct Builder<'a, E: Element> {
    store: &'a mut ParamStore<E>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, E: Element> Builder<'a, E> {
    pub fn new(store: &'a mut ParamStore<E>, seed: u64) -> Self {
        Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    fn name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    pub fn push(&mut self, scope: &str) {
        self.prefix.push(scope.to_string());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` with `scope` appended to the name prefix.
    pub fn scoped<T>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.push(scope);
        let out = f(self);
        self.pop();
        out
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn conv_weight(&mut self, leaf: &str, shape: [usize; 4]) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let data: Vec<E> = (0..shape.iter().product::<usize>())
            .map(|_| E::of(self.rng.gen_range(-bound..bound)))
            .collect();
        let t = Tensor::from_vec(&shape, data).expect("shape matches data");
        self.store.add_param(self.name(leaf), t)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add_param(self.name(leaf), Tensor::full(shape, E::of(value)))
    }

    pub fn buffer(&mut self, leaf: &str, values: Vec<f64>) -> BufferId {
        self.store.add_buffer(self.name(leaf), values)
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        self.store.param_mut(id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the graph being recorded, the store it reads from, and
/// the mode that selects batch-norm behaviour.
pub struct Ctx<'s, E: Element> {
    pub graph: Graph<E>,
    store: &'s mut ParamStore<E>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_params: bool,
}

impl<'s, E: Element> Ctx<'s, E> {
    pub fn new(store: &'s mut ParamStore<E>, mode: Mode) -> Self {
        let n = store.params.len();
        Ctx {
            graph: Graph::new(),
            store,
            bound: vec![None; n],
            mode,
            track_params: mode == Mode::Train,
        }
    }

    /// Whether parameter leaves receive gradients; defaults to `mode == Train`.
    pub fn set_track_params(&mut self, on: bool) {
        self.track_params = on;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<E> {
        self.store
    }

    /// Leaf node for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = &self.store.params[id.0];
        let v = if self.track_params {
            self.graph.leaf(t)
        } else {
            self.graph.leaf(&t.clone().with_requires_grad(false))
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Leaf nodes for every parameter, in store order.
    pub fn bind_all(&mut self) -> Vec<Var> {
        (0..self.store.params.len()).map(|i| self.param(ParamId(i))).collect()
    }

    pub fn input(&mut self, t: Tensor<E>) -> Var {
        self.graph.leaf_owned(t)
    }

    pub fn scoped<T>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.graph.push_scope(scope);
        let out = f(self);
        self.graph.pop_scope();
        out
    }

    /// Batch norm with running-state bookkeeping.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: BufferId,
        running_var: BufferId,
    ) -> Result<Var> {
        let (g, b) = (self.param(gamma), self.param(beta));
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.graph.batchnorm2d(x, g, b, BnStats::Batch)?;
                let (mean, var) = stats.expect("batch statistics");
                let [n, _, h, w] = crate::tensor::dims4(self.graph.shape(x), "batchnorm")?;
                let m = (n * h * w) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let rm = self.store.buffer_mut(running_mean);
                for (r, &v) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
                let rv = self.store.buffer_mut(running_var);
                for (r, &v) in rv.iter_mut().zip(&var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.store.buffer(running_mean).to_vec();
                let var = self.store.buffer(running_var).to_vec();
                let (y, _) = self.graph.batchnorm2d(x, g, b, BnStats::Running { mean: &mean, var: &var })?;
                Ok(y)
            }
        }
    }

    /// Runs backward from `loss` and stores each parameter's gradient on the
    /// parameter tensor. Parameters not reached get a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)?;
        for (i, slot) in self.bound.iter().enumerate() {
            let p = &mut self.store.params[i];
            let grad = slot
                .and_then(|v| self.graph.grad(v).map(<[E]>::to_vec))
                .unwrap_or_else(|| vec![E::zero(); p.numel()]);
            p.set_grad(grad)?;
        }
        Ok(())
    }

    pub fn into_graph(self) -> Graph<E> {
        self.graph
    }
}
