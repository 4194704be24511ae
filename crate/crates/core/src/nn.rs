//! Parameter storage and the handful of layers the model is built from.

use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Weight,
    /// Running statistics; updated outside the tape.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Named tensors for every module, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn weight(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add(name, value, ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add(name, value, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar count of optimizer-updated tensors.
    pub fn weight_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Order-sensitive CRC over names and raw bits of every tensor.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for v in e.value.data() {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Binds stored parameters into one forward graph and collects side effects.
pub struct Ctx<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    pub train: bool,
    /// Per-channel batch statistics observed by batch-norm layers in train mode.
    pub norm_stats: Vec<NormStats>,
}

#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean_buffer: ParamId,
    pub var_buffer: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            train,
            norm_stats: Vec::new(),
        }
    }

    /// Continues an existing graph, e.g. one owned by a gradient checker.
    pub fn with_graph(store: &'a ParamStore, graph: Graph, train: bool) -> Self {
        Self {
            graph,
            ..Self::new(store, train)
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Uses `v` for `id` instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    /// Graph leaf for a stored tensor, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.store.entry(id).kind == ParamKind::Weight {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Graph leaf bound to `id`, if used in this pass.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradients for every bound weight, in store order.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

/// Fan-in scaled uniform init with variance `1 / fan_in`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_c: usize,
    pub out_c: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_c;
        let weight = store.weight(
            format!("{name}.weight"),
            fan_in_uniform(&[kernel, kernel, in_c, out_c], fan_in, rng),
        );
        let bias = bias.then(|| store.weight(format!("{name}.bias"), Tensor::zeros(&[out_c])));
        Self {
            weight,
            bias,
            kernel,
            stride,
            pad: kernel / 2,
            in_c,
            out_c,
        }
    }

    /// NHWC in, NHWC out.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let y = ctx.graph.conv2d(x, w, self.stride, self.pad);
        match self.bias {
            Some(b) => {
                let b = ctx.p(b);
                ctx.graph.add_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.weight(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            beta: store.weight(format!("{name}.beta"), Tensor::zeros(&[c])),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        if ctx.train {
            let rows = ctx.graph.value(x).numel() / ctx.graph.value(g).numel();
            let (y, mean, var) = ctx.graph.batch_norm(x, g, b, self.eps);
            ctx.norm_stats.push(NormStats {
                mean_buffer: self.running_mean,
                var_buffer: self.running_var,
                mean,
                var,
                count: rows,
            });
            y
        } else {
            let mean = ctx.store().get(self.running_mean).data().to_vec();
            let var = ctx.store().get(self.running_var).data().to_vec();
            ctx.graph.frozen_norm(x, g, b, &mean, &var, self.eps)
        }
    }
}

/// Folds observed batch statistics into running averages.
pub fn update_running_stats(store: &mut ParamStore, stats: &[NormStats], momentum: f64) {
    for s in stats {
        let unbias = if s.count > 1 {
            s.count as f64 / (s.count - 1) as f64
        } else {
            1.0
        };
        for (r, m) in store.get_mut(s.mean_buffer).data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in store.get_mut(s.var_buffer).data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - momentum) * *r + momentum * v * unbias;
        }
    }
}

/// Affine map over the last axis: `[N, in] -> [N, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.weight(
                format!("{name}.weight"),
                fan_in_uniform(&[in_dim, out_dim], in_dim, rng),
            ),
            bias: Some(store.weight(format!("{name}.bias"), Tensor::zeros(&[out_dim]))),
            in_dim,
            out_dim,
        }
    }

    pub fn without_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.weight(
                format!("{name}.weight"),
                fan_in_uniform(&[in_dim, out_dim], in_dim, rng),
            ),
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let y = ctx.graph.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = ctx.p(b);
                ctx.graph.add_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.weight(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.weight(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        ctx.graph.layer_norm(x, g, b, self.eps)
    }
}
