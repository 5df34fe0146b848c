//! Named parameter storage shared by every network component.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{BnMode, Gradients, RunningStats, Tape, Var};
use crate::tensor::Tensor;

pub type ParamId = usize;
pub type StatsId = usize;

/// Flat, ordered list of learnable tensors plus batch-norm statistics.
/// Insertion order is the optimizer and checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {}", name);
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    /// He-uniform weights: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    pub fn add_he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape matches data"))
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stat_names.push(name.into());
        self.stats.push(RunningStats::new(channels));
        self.stats.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().collect()
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`, tracked for gradients.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.variable(t.clone())).collect()
    }

    /// Records every parameter on `tape` as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Copies gradients for the bound variables into the tensors' `grad`.
    pub fn store_grads(&mut self, vars: &[Var<'_>], grads: &Gradients) -> Result<()> {
        if vars.len() != self.tensors.len() {
            return Err(Error::DimensionMismatch("bound variables do not match store".into()));
        }
        for (t, v) in self.tensors.iter_mut().zip(vars) {
            t.grad = Some(grads.get_or_zeros(*v));
        }
        Ok(())
    }

    /// Replaces values from `(name, tensor)` records; names and shapes must
    /// match this store exactly.
    pub fn load_tensor(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Parse(format!("unexpected parameter '{}'", name)))?;
        if self.tensors[id].shape != tensor.shape {
            return Err(Error::DimensionMismatch(format!(
                "parameter '{}' has shape {:?}, checkpoint holds {:?}",
                name, self.tensors[id].shape, tensor.shape
            )));
        }
        self.tensors[id] = tensor;
        Ok(())
    }

    pub fn stats_id(&self, name: &str) -> Option<StatsId> {
        self.stat_names.iter().position(|n| n == name)
    }
}

/// How batch-norm layers behave during a forward pass.
pub enum NormMode<'s> {
    /// Batch statistics, folding them into the running statistics.
    Train(&'s mut [RunningStats]),
    /// Batch statistics without touching the running statistics.
    Batch,
    /// Running statistics.
    Eval(&'s [RunningStats]),
}

impl NormMode<'_> {
    pub fn layer(&mut self, id: StatsId) -> BnMode<'_> {
        match self {
            NormMode::Train(s) => BnMode::Train(Some(&mut s[id])),
            NormMode::Batch => BnMode::Train(None),
            NormMode::Eval(s) => BnMode::Eval(&s[id]),
        }
    }
}

/// Conv + BN + ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_he(format!("{prefix}.weight"), &[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
        let gamma = store.add(format!("{prefix}.bn.gamma"), Tensor::full(&[cout], 1.0));
        let beta = store.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[cout]));
        let stats = store.add_stats(format!("{prefix}.bn"), cout);
        Self {
            weight,
            bias,
            gamma,
            beta,
            stats,
            cin,
            cout,
            kernel,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], x: Var<'t>, norm: &mut NormMode<'_>) -> Result<Var<'t>> {
        let y = tape.conv2d(x, p[self.weight], p[self.bias])?;
        let y = tape.batch_norm(y, p[self.gamma], p[self.beta], norm.layer(self.stats))?;
        Ok(tape.relu(y))
    }

    /// Same block applied to the channel outer product of `x` and `y`; the
    /// kernel must be 1x1 over `m*m` inputs.
    pub fn forward_pair<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        x: Var<'t>,
        y: Var<'t>,
        norm: &mut NormMode<'_>,
    ) -> Result<Var<'t>> {
        let z = tape.pair_project(x, y, p[self.weight], p[self.bias])?;
        let z = tape.batch_norm(z, p[self.gamma], p[self.beta], norm.layer(self.stats))?;
        Ok(tape.relu(z))
    }
}

/// Fully connected layer `x W^T + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add_he(format!("{prefix}.weight"), &[dout, din], din, rng);
        let bias = bias.then(|| store.add(format!("{prefix}.bias"), Tensor::zeros(&[dout])));
        Self {
            weight,
            bias,
            din,
            dout,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        tape.linear(x, p[self.weight], self.bias.map(|b| p[b]))
    }
}
