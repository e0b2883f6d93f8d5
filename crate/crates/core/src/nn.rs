//! Parameter storage, layers and the optimizer shared by every network.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AfnError, Result};
use crate::tape::{Gradients, Tape, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Serializable tensor with a shape manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Flat, named collection of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Register every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Register every parameter as a constant (inference, or frozen submodels).
    pub fn bind_frozen(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| NamedTensor {
                name: name.clone(),
                shape: [v.nrows(), v.ncols()],
                data: v.iter().copied().collect(),
            })
            .collect()
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let mut store = ParamStore::new();
        for t in tensors {
            let value = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|_| AfnError::Bundle(format!("tensor {} does not match its shape", t.name)))?;
            store.add(t.name.clone(), value);
        }
        Ok(store)
    }

    /// Replace values from `tensors`, requiring identical names and shapes.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        if tensors.len() != self.values.len() {
            return Err(AfnError::Bundle(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                tensors.len()
            )));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.name != self.names[i] || t.shape != [self.values[i].nrows(), self.values[i].ncols()] {
                return Err(AfnError::Bundle(format!("tensor {} does not match manifest", t.name)));
            }
            self.values[i] = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|_| AfnError::Bundle(format!("bad data for {}", t.name)))?;
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn grads(&self, g: &Gradients, store: &ParamStore) -> Vec<Array2<f64>> {
        self.vars
            .iter()
            .zip(store.ids())
            .map(|(&v, id)| g.get_or_zeros(v, store.get(id).dim()))
            .collect()
    }
}

pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, output: usize) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, input, output));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, output)));
        Self { w, b, input, output }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, p.var(self.w));
        tape.add_row(h, p.var(self.b))
    }
}

/// Feed-forward stack with `tanh` hidden activations and a linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Dense::new(store, rng, &format!("{name}.{i}"), prev, h));
            prev = h;
        }
        layers.push(Dense::new(store, rng, &format!("{name}.out"), prev, output));
        Self { layers }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h);
            if i < last {
                h = tape.tanh(h);
            }
        }
        h
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }
}

/// Single LSTM layer with fused gate weights (gate order i, f, g, o).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, hidden: usize) -> Self {
        let wx = store.add(format!("{name}.wx"), xavier(rng, input, 4 * hidden));
        let wh = store.add(format!("{name}.wh"), xavier(rng, hidden, 4 * hidden));
        let mut bias = Array2::zeros((1, 4 * hidden));
        for j in hidden..2 * hidden {
            bias[[0, j]] = 1.0;
        }
        let b = store.add(format!("{name}.b"), bias);
        Self { wx, wh, b, input, hidden }
    }

    pub fn zero_state(&self, tape: &Tape, batch: usize) -> LstmState {
        LstmState {
            h: tape.constant(Array2::zeros((batch, self.hidden))),
            c: tape.constant(Array2::zeros((batch, self.hidden))),
        }
    }

    pub fn step(&self, tape: &Tape, p: &Bound, x: Var, state: LstmState) -> LstmState {
        let hd = self.hidden;
        let gates = tape.add(tape.matmul(x, p.var(self.wx)), tape.matmul(state.h, p.var(self.wh)));
        let gates = tape.add_row(gates, p.var(self.b));
        let i = tape.sigmoid(tape.slice_cols(gates, 0, hd));
        let f = tape.sigmoid(tape.slice_cols(gates, hd, 2 * hd));
        let g = tape.tanh(tape.slice_cols(gates, 2 * hd, 3 * hd));
        let o = tape.sigmoid(tape.slice_cols(gates, 3 * hd, 4 * hd));
        let c = tape.add(tape.mul(f, state.c), tape.mul(i, g));
        let h = tape.mul(o, tape.tanh(c));
        LstmState { h, c }
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<_> = store.ids().map(|id| Array2::zeros(store.get(id).dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Array2<f64>]) {
        let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[i];
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let w = store.get_mut(id);
            ndarray::Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}
