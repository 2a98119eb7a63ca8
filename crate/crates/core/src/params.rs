//! Named parameter registry and the per-forward graph context that binds
//! parameters onto a tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MooseError, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Position of a parameter in the forward pipeline. Pathway stages are
/// numbered `0` (embedding), `1..=L` (blocks), `L + 1` (final norm).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Spatial(usize),
    Temporal(usize),
    Fusion,
    Aggregation,
    Head,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Whether weight decay applies (off for norms, biases, cls, positions).
    pub decay: bool,
    pub stage: Stage,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        decay: bool,
        stage: Stage,
    ) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
            decay,
            stage,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Adds the gradients a finished backward left on `ctx`'s bound params.
    pub fn accumulate_from(&mut self, ctx: &Ctx<'_>) -> Result<()> {
        for (id, var) in ctx.bound() {
            if let Some(g) = ctx.tape.grad(var) {
                self.entries[id.0].tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Replaces parameter values from `other`, which must have identical
    /// names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(MooseError::invalid("parameter registries differ in length"));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(MooseError::invalid(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    dst.name,
                    dst.tensor.shape(),
                    src.name,
                    src.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

/// Creates parameters in a fixed order from one seeded stream.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    stage: Stage,
}

pub const INIT_STD: f64 = 0.02;

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
            stage: Stage::Head,
        }
    }

    pub fn scope(&mut self, prefix: &str, stage: Stage) {
        self.prefix = prefix.to_string();
        self.stage = stage;
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, decay: bool) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        let full = self.full_name(name);
        self.store.add(full, t, decay, self.stage)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, decay: bool) -> ParamId {
        let full = self.full_name(name);
        self.store
            .add(full, Tensor::full(shape, value), decay, self.stage)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }
}

/// Attention weights captured during a traced forward.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub purpose: String,
    pub layer: usize,
    pub head: usize,
    /// Index of the sequence within the batch (the frame index for pathway
    /// and fusion attention).
    pub sequence: usize,
    pub weights: Tensor,
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Ctx<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trace: Option<Vec<AttentionRecord>>,
}

impl<'p> Ctx<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trace: None,
        }
    }

    pub fn traced(store: &'p ParamStore) -> Self {
        let mut ctx = Ctx::new(store);
        ctx.trace = Some(Vec::new());
        ctx
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.store.tensor(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn is_tracing(&self) -> bool {
        self.trace.is_some()
    }

    pub fn record(&mut self, rec: AttentionRecord) {
        if let Some(t) = &mut self.trace {
            t.push(rec);
        }
    }

    pub fn take_trace(&mut self) -> Option<Vec<AttentionRecord>> {
        self.trace.take()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        // Glorot-normal keeps activations and attention logits O(1) at init.
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = b.normal(&format!("{name}.weight"), &[in_dim, out_dim], std, true);
        let bias = bias.then(|| b.constant(&format!("{name}.bias"), &[out_dim], 0.0, false));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn num_params(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }

    /// `x · W + b` on `[rows × in_dim]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let y = ctx.tape.matmul(x, w)?;
        match self.bias {
            Some(bias) => {
                let b = ctx.param(bias);
                ctx.tape.add_tiled(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: b.constant(&format!("{name}.gamma"), &[dim], 1.0, false),
            beta: b.constant(&format!("{name}.beta"), &[dim], 0.0, false),
            dim,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.tape.layer_norm(x, g, b)
    }
}
