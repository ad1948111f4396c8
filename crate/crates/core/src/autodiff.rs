//! Reverse-mode automatic differentiation over dense `f64` vectors.
//!
//! Every model in the crate records its forward pass on a [`Tape`] that
//! borrows a [`ParamStore`]. Calling [`Tape::backward`] on a scalar output
//! returns a [`Grads`] holding one gradient buffer per touched parameter.
//! Values are flat vectors; a parameter additionally carries a `(rows, cols)`
//! shape so that it can act as the weight of a matrix-vector product.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named, shaped, trainable tensor stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    /// Parameter group, used for reporting and gradient checks.
    pub group: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> ParamId {
        assert_eq!(data.len(), rows * cols, "parameter data does not match its shape");
        self.params.push(Param {
            name: name.into(),
            group: group.into(),
            rows,
            cols,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn zeros(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        rows: usize,
        cols: usize,
    ) -> ParamId {
        self.add(name, group, rows, cols, vec![0.0; rows * cols])
    }

    /// Adds a parameter initialized uniformly in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.add(name, group, rows, cols, data)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// True when every entry of every parameter is finite.
    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Adds `other` into `self`, element-wise.
    pub fn accumulate(&mut self, other: &Grads) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.grads[i] {
                    Some(mine) => mine.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    MatVec { w: Var, x: Var, rows: usize, cols: usize },
    Row { table: Var, row: usize },
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    Dot(Var, Var),
    LogSoftmax(Var),
    Pick(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Records a computation for later differentiation.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.params.get(id).data,
            _ => &self.nodes[v.0].value,
        }
    }

    /// Value of a length-one node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    fn size(&self, v: Var) -> usize {
        self.value(v).len()
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![value], Op::Const)
    }

    /// The node for a stored parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Vec::new(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "element-wise operands differ in length");
        let value = va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect();
        self.push(value, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    /// Multiplies every entry of `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar_value(s);
        self.map(a, |x| x * c, Op::ScaleBy(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// `W x` for a parameter node `w` of shape `(rows, cols)`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (rows, cols) = match self.nodes[w.0].op {
            Op::Param(id) => {
                let p = self.params.get(id);
                (p.rows, p.cols)
            }
            _ => panic!("matvec weight must be a parameter node"),
        };
        let wv = self.value(w);
        let xv = self.value(x);
        assert_eq!(xv.len(), cols, "matvec input length mismatch");
        let value = wv
            .chunks_exact(cols)
            .map(|row| row.iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        self.push(value, Op::MatVec { w, x, rows, cols })
    }

    /// Row `row` of a parameter table.
    pub fn row(&mut self, table: Var, row: usize) -> Var {
        let cols = match self.nodes[table.0].op {
            Op::Param(id) => self.params.get(id).cols,
            _ => panic!("row lookup requires a parameter node"),
        };
        let value = self.value(table)[row * cols..(row + 1) * cols].to_vec();
        self.push(value, Op::Row { table, row })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::new();
        for p in parts {
            value.extend_from_slice(self.value(*p));
        }
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a)[start..start + len].to_vec();
        self.push(value, Op::Slice(a, start))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "dot operands differ in length");
        let s = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        self.push(vec![s], Op::Dot(a, b))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax(self.value(a));
        self.push(value, Op::LogSoftmax(a))
    }

    /// Entry `index` of `a` as a scalar node.
    pub fn pick(&mut self, a: Var, index: usize) -> Var {
        let v = self.value(a)[index];
        self.push(vec![v], Op::Pick(a, index))
    }

    /// Sum of equally sized nodes.
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let (first, rest) = parts.split_first().expect("add_all needs at least one node");
        rest.iter().fold(*first, |acc, p| self.add(acc, *p))
    }

    pub fn mean_of(&mut self, parts: &[Var]) -> Var {
        let total = self.add_all(parts);
        self.scale(total, 1.0 / parts.len() as f64)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Back-propagates from the scalar node `output`.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.size(output), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        let mut out = Grads {
            grads: vec![None; self.params.len()],
        };

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.grads[id.0] = Some(g),
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |d| axpy(d, &g, 1.0));
                    self.acc(&mut grads, *b, |d| axpy(d, &g, 1.0));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |d| axpy(d, &g, 1.0));
                    self.acc(&mut grads, *b, |d| axpy(d, &g, -1.0));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, |d| {
                        d.iter_mut().zip(&g).zip(vb).for_each(|((d, g), y)| *d += g * y)
                    });
                    self.acc(&mut grads, *b, |d| {
                        d.iter_mut().zip(&g).zip(va).for_each(|((d, g), x)| *d += g * x)
                    });
                }
                Op::Div(a, b) => {
                    let vb = self.value(*b);
                    self.acc(&mut grads, *a, |d| {
                        d.iter_mut().zip(&g).zip(vb).for_each(|((d, g), y)| *d += g / y)
                    });
                    self.acc(&mut grads, *b, |d| {
                        d.iter_mut()
                            .zip(&g)
                            .zip(y.iter().zip(vb))
                            .for_each(|((d, g), (q, y))| *d -= g * q / y)
                    });
                }
                Op::Scale(a, c) => self.acc(&mut grads, *a, |d| axpy(d, &g, *c)),
                Op::ScaleBy(a, s) => {
                    let c = self.scalar_value(*s);
                    let va = self.value(*a);
                    self.acc(&mut grads, *a, |d| axpy(d, &g, c));
                    let ds: f64 = g.iter().zip(va).map(|(g, x)| g * x).sum();
                    self.acc(&mut grads, *s, |d| d[0] += ds);
                }
                Op::Sigmoid(a) => self.acc(&mut grads, *a, |d| {
                    d.iter_mut()
                        .zip(&g)
                        .zip(y)
                        .for_each(|((d, g), y)| *d += g * y * (1.0 - y))
                }),
                Op::Tanh(a) => self.acc(&mut grads, *a, |d| {
                    d.iter_mut()
                        .zip(&g)
                        .zip(y)
                        .for_each(|((d, g), y)| *d += g * (1.0 - y * y))
                }),
                Op::Exp(a) => self.acc(&mut grads, *a, |d| {
                    d.iter_mut().zip(&g).zip(y).for_each(|((d, g), y)| *d += g * y)
                }),
                Op::Log(a) => {
                    let va = self.value(*a);
                    self.acc(&mut grads, *a, |d| {
                        d.iter_mut().zip(&g).zip(va).for_each(|((d, g), x)| *d += g / x)
                    })
                }
                Op::Sqrt(a) => self.acc(&mut grads, *a, |d| {
                    d.iter_mut()
                        .zip(&g)
                        .zip(y)
                        .for_each(|((d, g), y)| *d += g * 0.5 / y)
                }),
                Op::Clamp(a, lo, hi) => {
                    let va = self.value(*a);
                    self.acc(&mut grads, *a, |d| {
                        d.iter_mut().zip(&g).zip(va).for_each(|((d, g), x)| {
                            if *x >= *lo && *x <= *hi {
                                *d += g
                            }
                        })
                    })
                }
                Op::MatVec { w, x, rows, cols } => {
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    self.acc(&mut grads, *w, |d| {
                        for r in 0..*rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                axpy(&mut d[r * cols..(r + 1) * cols], xv, gr);
                            }
                        }
                    });
                    self.acc(&mut grads, *x, |d| {
                        for r in 0..*rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                axpy(d, &wv[r * cols..(r + 1) * cols], gr);
                            }
                        }
                    });
                }
                Op::Row { table, row } => {
                    let cols = g.len();
                    self.acc(&mut grads, *table, |d| {
                        axpy(&mut d[row * cols..(row + 1) * cols], &g, 1.0)
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.size(*p);
                        self.acc(&mut grads, *p, |d| axpy(d, &g[offset..offset + n], 1.0));
                        offset += n;
                    }
                }
                Op::Slice(a, start) => self.acc(&mut grads, *a, |d| {
                    axpy(&mut d[*start..*start + g.len()], &g, 1.0)
                }),
                Op::Sum(a) => self.acc(&mut grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
                Op::Dot(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, |d| axpy(d, vb, g[0]));
                    self.acc(&mut grads, *b, |d| axpy(d, va, g[0]));
                }
                Op::LogSoftmax(a) => {
                    let gsum: f64 = g.iter().sum();
                    self.acc(&mut grads, *a, |d| {
                        d.iter_mut()
                            .zip(&g)
                            .zip(y)
                            .for_each(|((d, g), y)| *d += g - y.exp() * gsum)
                    })
                }
                Op::Pick(a, index) => self.acc(&mut grads, *a, |d| d[*index] += g[0]),
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.size(v)]);
        }
        f(slot.as_mut().expect("just filled"));
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    log_softmax(x).into_iter().map(f64::exp).collect()
}
