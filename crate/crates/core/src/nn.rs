//! Layers shared by the models: affine maps, embedding tables, an LSTM cell,
//! and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamId, ParamStore, Tape, Var};

/// `y = W x + b` with `W` of shape `(output, input)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(input)` initialization.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), group, output, input, bound, rng);
        let bias = store.uniform(format!("{name}.bias"), group, output, 1, bound, rng);
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matvec(w, x);
        tape.add(y, b)
    }

    /// Evaluates the map without recording a tape.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.weight);
        let b = store.get(self.bias);
        assert_eq!(x.len(), w.cols);
        w.data
            .chunks_exact(w.cols)
            .zip(&b.data)
            .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.uniform(name, group, rows, dim, 0.1, rng);
        Self { table, rows, dim }
    }

    pub fn lookup(&self, tape: &mut Tape, index: usize) -> Var {
        let t = tape.param(self.table);
        tape.row(t, index)
    }

    pub fn row<'a>(&self, store: &'a ParamStore, index: usize) -> &'a [f64] {
        &store.get(self.table).data[index * self.dim..(index + 1) * self.dim]
    }
}

/// Single-layer LSTM cell with gate order `(input, forget, cell, output)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.uniform(format!("{name}.w_ih"), group, 4 * hidden, input, bound, rng);
        let w_hh = store.uniform(format!("{name}.w_hh"), group, 4 * hidden, hidden, bound, rng);
        let bias = store.uniform(format!("{name}.bias"), group, 4 * hidden, 1, bound, rng);
        Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        }
    }

    pub fn zero_state(&self, tape: &mut Tape) -> LstmState {
        LstmState {
            h: tape.constant(vec![0.0; self.hidden]),
            c: tape.constant(vec![0.0; self.hidden]),
        }
    }

    pub fn step(&self, tape: &mut Tape, x: Var, state: LstmState) -> LstmState {
        let n = self.hidden;
        let w_ih = tape.param(self.w_ih);
        let w_hh = tape.param(self.w_hh);
        let b = tape.param(self.bias);
        let xi = tape.matvec(w_ih, x);
        let hh = tape.matvec(w_hh, state.h);
        let pre = tape.add(xi, hh);
        let pre = tape.add(pre, b);
        let i = tape.slice(pre, 0, n);
        let f = tape.slice(pre, n, n);
        let g = tape.slice(pre, 2 * n, n);
        let o = tape.slice(pre, 3 * n, n);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, state.c);
        let write = tape.mul(i, g);
        let c = tape.add(keep, write);
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc);
        LstmState { h, c }
    }

    /// Runs the cell over `inputs` from a zero state and returns every hidden state.
    pub fn run(&self, tape: &mut Tape, inputs: &[Var]) -> Vec<Var> {
        let mut state = self.zero_state(tape);
        inputs
            .iter()
            .map(|x| {
                state = self.step(tape, *x, state);
                state.h
            })
            .collect()
    }
}

/// Adam with optional global gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.data.len()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn with_clip_norm(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = &mut store.get_mut(id).data;
            for k in 0..p.len() {
                let gk = g[k] * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
