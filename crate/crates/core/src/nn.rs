//! Parameter storage and the small set of layers used by the extraction network.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tensor_io::NamedTensor;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Running statistics are stored alongside weights but are not optimized.
    pub trainable: bool,
}

/// Named, ordered parameter collection.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let t = Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound));
        self.add(name, t, true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.entries
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: vec![e.value.rows(), e.value.cols()],
                data: e.value.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites values from `tensors`; every parameter must be present with its shape.
    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let by_name: HashMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for e in &mut self.entries {
            let t = by_name
                .get(e.name.as_str())
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {}", e.name)))?;
            if t.shape != [e.value.rows(), e.value.cols()] {
                return Err(Error::Data(format!(
                    "parameter {} has shape {:?} in checkpoint, expected {:?}",
                    e.name,
                    t.shape,
                    e.value.shape()
                )));
            }
            e.value.data_mut().copy_from_slice(&t.data);
        }
        if tensors.len() != self.entries.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        Ok(())
    }
}

/// Gradients for every parameter, `None` where a parameter was unused.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Adds `other` into `self` entrywise.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// A forward pass under construction: a tape plus lazily bound parameters.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p Params,
    bound: Vec<Option<Var>>,
    pub training: bool,
    /// Pending running-statistic updates `(id, new value)` from batch-norm layers.
    pub stat_updates: Vec<(ParamId, Tensor)>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p Params, training: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            training,
            stat_updates: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.value(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Backpropagates from the scalar `loss` and returns per-parameter gradients.
    pub fn param_grads(&self, loss: Var) -> (Gradients, ParamGrads) {
        let grads = self.tape.backward(loss);
        let per_param = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v).cloned()))
            .collect();
        (grads, ParamGrads { grads: per_param })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            w: params.uniform(format!("{name}.weight"), input, output, bound, rng),
            b: params.uniform(format!("{name}.bias"), 1, output, bound, rng),
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.tape.affine(x, w, b)
    }
}

/// Per-row normalization over the feature axis with learned gain and shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::from_vec(1, dim, vec![1.0; dim]), true),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(1, dim), true),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = self.dim as f64;
        let center = g.constant(Tensor::from_fn(self.dim, self.dim, |i, j| {
            (i == j) as u8 as f64 - 1.0 / n
        }));
        let average = g.constant(Tensor::from_vec(self.dim, self.dim, vec![1.0 / n; self.dim * self.dim]));
        let centered = g.tape.matmul(x, center);
        let sq = g.tape.square(centered);
        let var = g.tape.matmul(sq, average);
        let var = g.tape.add_scalar(var, NORM_EPS);
        let inv = g.tape.powf(var, -0.5);
        let normed = g.tape.mul(centered, inv);
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let y = g.tape.mul_row(normed, gamma);
        g.tape.add_row(y, beta)
    }
}

/// Feature-wise normalization over rows (the batch × time axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::from_vec(1, dim, vec![1.0; dim]), true),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(1, dim), true),
            running_mean: params.add(format!("{name}.running_mean"), Tensor::zeros(1, dim), false),
            running_var: params.add(
                format!("{name}.running_var"),
                Tensor::from_vec(1, dim, vec![1.0; dim]),
                false,
            ),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let normed = if g.training {
            let mean = g.tape.mean_rows(x);
            let centered = g.tape.sub_row(x, mean);
            let sq = g.tape.square(centered);
            let var = g.tape.mean_rows(sq);
            let rows = g.tape.shape(x).0 as f64;
            let blend = |old: &Tensor, new: &Tensor, unbias: f64| {
                Tensor::from_fn(1, old.cols(), |_, j| {
                    BN_MOMENTUM * old.get(0, j) + (1.0 - BN_MOMENTUM) * new.get(0, j) * unbias
                })
            };
            let params = g.params();
            let unbias = if rows > 1.0 { rows / (rows - 1.0) } else { 1.0 };
            let new_mean = blend(params.value(self.running_mean), g.value(mean), 1.0);
            let new_var = blend(params.value(self.running_var), g.value(var), unbias);
            g.stat_updates.push((self.running_mean, new_mean));
            g.stat_updates.push((self.running_var, new_var));
            let var = g.tape.add_scalar(var, NORM_EPS);
            let inv = g.tape.powf(var, -0.5);
            g.tape.mul_row(centered, inv)
        } else {
            let params = g.params();
            let mean = params.value(self.running_mean).clone();
            let inv = params.value(self.running_var).map(|v| 1.0 / (v + NORM_EPS).sqrt());
            let mean = g.constant(mean);
            let inv = g.constant(inv);
            let centered = g.tape.sub_row(x, mean);
            g.tape.mul_row(centered, inv)
        };
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let y = g.tape.mul_row(normed, gamma);
        g.tape.add_row(y, beta)
    }
}

/// Single-layer LSTM cell with gate order `i, f, g, o` and one bias vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(params: &mut Params, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: params.uniform(format!("{name}.w_ih"), input, 4 * hidden, bound, rng),
            w_hh: params.uniform(format!("{name}.w_hh"), hidden, 4 * hidden, bound, rng),
            bias: params.uniform(format!("{name}.bias"), 1, 4 * hidden, bound, rng),
            input,
            hidden,
        }
    }

    /// Runs over `steps` (each `[batch × input]`) from zero state; returns every hidden state.
    pub fn run(&self, g: &mut Graph, steps: &[Var]) -> Vec<Var> {
        let (w_ih, w_hh, bias) = (g.param(self.w_ih), g.param(self.w_hh), g.param(self.bias));
        let h = self.hidden;
        let mut state: Option<(Var, Var)> = None;
        let mut outputs = Vec::with_capacity(steps.len());
        for &x in steps {
            let mut gates = g.tape.affine(x, w_ih, bias);
            if let Some((h_prev, _)) = state {
                let rec = g.tape.matmul(h_prev, w_hh);
                gates = g.tape.add(gates, rec);
            }
            let i = g.tape.slice_cols(gates, 0, h);
            let f = g.tape.slice_cols(gates, h, 2 * h);
            let c_in = g.tape.slice_cols(gates, 2 * h, 3 * h);
            let o = g.tape.slice_cols(gates, 3 * h, 4 * h);
            let i = g.tape.sigmoid(i);
            let o = g.tape.sigmoid(o);
            let c_in = g.tape.tanh(c_in);
            let mut c = g.tape.mul(i, c_in);
            if let Some((_, c_prev)) = state {
                let f = g.tape.sigmoid(f);
                let kept = g.tape.mul(f, c_prev);
                c = g.tape.add(c, kept);
            }
            let tc = g.tape.tanh(c);
            let h_new = g.tape.mul(o, tc);
            outputs.push(h_new);
            state = Some((h_new, c));
        }
        outputs
    }
}

/// Reference LSTM on plain slices, used to cross-check the taped version.
pub fn lstm_reference(params: &Params, cell: &Lstm, steps: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (w_ih, w_hh, b) = (
        params.value(cell.w_ih),
        params.value(cell.w_hh),
        params.value(cell.bias),
    );
    let hd = cell.hidden;
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    let mut out = Vec::new();
    for x in steps {
        let mut z = b.data().to_vec();
        for (k, zk) in z.iter_mut().enumerate() {
            for (j, xj) in x.iter().enumerate() {
                *zk += xj * w_ih.get(j, k);
            }
            for (j, hj) in h.iter().enumerate() {
                *zk += hj * w_hh.get(j, k);
            }
        }
        for u in 0..hd {
            let (i, f, gg, o) = (
                sigmoid(z[u]),
                sigmoid(z[hd + u]),
                z[2 * hd + u].tanh(),
                sigmoid(z[3 * hd + u]),
            );
            c[u] = f * c[u] + i * gg;
            h[u] = o * c[u].tanh();
        }
        out.push(h.clone());
    }
    out
}
