//! Minimal reverse-mode differentiation over small dense vectors.
//!
//! Every tape node holds a vector (scalars are length-1 vectors). Model
//! parameters are never copied onto the tape: ops such as [`Tape::matvec`]
//! reference a parameter tensor by index and accumulate its gradient
//! directly into the parameter gradient buffers during [`Tape::backward`].

use serde::{Deserialize, Serialize};

/// Dense row-major matrix; vectors are `cols == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Index of a parameter tensor in the slice the tape was built over.
pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Row(ParamId, usize),
    MatVec(ParamId, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Vec<Var>),
    Mean(Vec<Var>),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Dots(Vec<Var>, Var),
    WeightedSum(Var, Vec<Var>),
    Gather(Var, Vec<usize>),
    LogSoftmax(Var),
    Softmax(Var),
    Cosine(Var, Var),
    Square(Var),
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    pub params: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to a tape node (zeros when it did not
    /// influence the output).
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.nodes.get(v.0).cloned().flatten().unwrap_or_else(|| vec![0.0; len])
    }
}

pub struct Tape<'p> {
    params: &'p [Tensor],
    values: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self { params, values: Vec::with_capacity(256), ops: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][0]
    }

    /// Constant or differentiable input; gradients are available through
    /// [`Gradients::wrt`].
    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(vec![value], Op::Leaf)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.values[v.0].clone();
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, p: ParamId) -> Var {
        let value = self.params[p].data.clone();
        self.push(value, Op::Param(p))
    }

    pub fn row(&mut self, p: ParamId, r: usize) -> Var {
        let value = self.params[p].row(r).to_vec();
        self.push(value, Op::Row(p, r))
    }

    pub fn matvec(&mut self, p: ParamId, x: Var) -> Var {
        let w = &self.params[p];
        let xv = &self.values[x.0];
        debug_assert_eq!(w.cols, xv.len(), "matvec shape mismatch for param {p}");
        let out = (0..w.rows)
            .map(|r| w.row(r).iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        self.push(out, Op::MatVec(p, x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.values[a.0].iter().map(|x| x * c).collect();
        self.push(out, Op::Scale(a, c))
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "sum of no terms");
        let mut out = self.values[xs[0].0].clone();
        for x in &xs[1..] {
            for (o, v) in out.iter_mut().zip(&self.values[x.0]) {
                *o += v;
            }
        }
        self.push(out, Op::Sum(xs.to_vec()))
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "mean of no terms");
        let n = xs.len() as f64;
        let mut out = vec![0.0; self.values[xs[0].0].len()];
        for x in xs {
            for (o, v) in out.iter_mut().zip(&self.values[x.0]) {
                *o += v / n;
            }
        }
        self.push(out, Op::Mean(xs.to_vec()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.values[a.0].iter().map(|x| x.tanh()).collect();
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.values[a.0].iter().map(|x| x.exp()).collect();
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.values[a.0].iter().map(|x| x.ln()).collect();
        self.push(out, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.values[a.0].iter().map(|x| x * x).collect();
        self.push(out, Op::Square(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let out = dot(&self.values[a.0], &self.values[b.0]);
        self.push(vec![out], Op::Dot(a, b))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let out = xs.iter().flat_map(|x| self.values[x.0].iter().copied()).collect();
        self.push(out, Op::Concat(xs.to_vec()))
    }

    /// `[rows[i] · q]` for every row.
    pub fn dots(&mut self, rows: &[Var], q: Var) -> Var {
        let qv = &self.values[q.0];
        let out = rows.iter().map(|r| dot(&self.values[r.0], qv)).collect();
        self.push(out, Op::Dots(rows.to_vec(), q))
    }

    /// `Σ_i w[i] · rows[i]`.
    pub fn weighted_sum(&mut self, w: Var, rows: &[Var]) -> Var {
        let wv = &self.values[w.0];
        assert_eq!(wv.len(), rows.len());
        let mut out = vec![0.0; self.values[rows[0].0].len()];
        for (wi, r) in wv.iter().zip(rows) {
            for (o, x) in out.iter_mut().zip(&self.values[r.0]) {
                *o += wi * x;
            }
        }
        self.push(out, Op::WeightedSum(w, rows.to_vec()))
    }

    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = &self.values[a.0];
        let out = idx.iter().map(|&i| av[i]).collect();
        self.push(out, Op::Gather(a, idx.to_vec()))
    }

    pub fn pick(&mut self, a: Var, i: usize) -> Var {
        self.gather(a, &[i])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax(&self.values[a.0]);
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = log_softmax(&self.values[a.0]).into_iter().map(f64::exp).collect();
        self.push(out, Op::Softmax(a))
    }

    /// Cosine similarity; both inputs must have nonzero norm.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let out = dot(av, bv) / (norm(av) * norm(bv));
        self.push(vec![out], Op::Cosine(a, b))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.values[out.0].len(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        let mut pgrads: Vec<Vec<f64>> = self.params.iter().map(|t| vec![0.0; t.len()]).collect();
        grads[out.0] = Some(vec![1.0]);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Param(p) => axpy(&mut pgrads[*p], &g, 1.0),
                Op::Row(p, r) => {
                    let cols = self.params[*p].cols;
                    axpy(&mut pgrads[*p][r * cols..(r + 1) * cols], &g, 1.0);
                }
                Op::MatVec(p, x) => {
                    let w = &self.params[*p];
                    let xv = &self.values[x.0];
                    let pg = &mut pgrads[*p];
                    let gx = acc(&mut grads, *x, xv.len());
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        let wrow = w.row(r);
                        let prow = &mut pg[r * w.cols..(r + 1) * w.cols];
                        for c in 0..w.cols {
                            prow[c] += gr * xv[c];
                            gx[c] += gr * wrow[c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut grads, *a, &g, 1.0);
                    add_into(&mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, *a, &g, 1.0);
                    add_into(&mut grads, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = zip_map(&g, &self.values[b.0], |x, y| x * y);
                    let gb: Vec<f64> = zip_map(&g, &self.values[a.0], |x, y| x * y);
                    add_into(&mut grads, *a, &ga, 1.0);
                    add_into(&mut grads, *b, &gb, 1.0);
                }
                Op::Scale(a, c) => add_into(&mut grads, *a, &g, *c),
                Op::Sum(xs) => {
                    for x in xs {
                        add_into(&mut grads, *x, &g, 1.0);
                    }
                }
                Op::Mean(xs) => {
                    let c = 1.0 / xs.len() as f64;
                    for x in xs {
                        add_into(&mut grads, *x, &g, c);
                    }
                }
                Op::Tanh(a) => {
                    let ga = zip_map(&g, &self.values[i], |gi, y| gi * (1.0 - y * y));
                    add_into(&mut grads, *a, &ga, 1.0);
                }
                Op::Exp(a) => {
                    let ga = zip_map(&g, &self.values[i], |gi, y| gi * y);
                    add_into(&mut grads, *a, &ga, 1.0);
                }
                Op::Ln(a) => {
                    let ga = zip_map(&g, &self.values[a.0], |gi, x| gi / x);
                    add_into(&mut grads, *a, &ga, 1.0);
                }
                Op::Square(a) => {
                    let ga = zip_map(&g, &self.values[a.0], |gi, x| 2.0 * gi * x);
                    add_into(&mut grads, *a, &ga, 1.0);
                }
                Op::Dot(a, b) => {
                    let s = g[0];
                    let vb = self.values[b.0].clone();
                    let va = self.values[a.0].clone();
                    add_into(&mut grads, *a, &vb, s);
                    add_into(&mut grads, *b, &va, s);
                }
                Op::Concat(xs) => {
                    let mut off = 0;
                    for x in xs {
                        let n = self.values[x.0].len();
                        add_into(&mut grads, *x, &g[off..off + n], 1.0);
                        off += n;
                    }
                }
                Op::Dots(rows, q) => {
                    let qv = &self.values[q.0];
                    let mut gq = vec![0.0; qv.len()];
                    for (r, gr) in rows.iter().zip(&g) {
                        if *gr == 0.0 {
                            continue;
                        }
                        axpy(&mut gq, &self.values[r.0], *gr);
                        add_into(&mut grads, *r, qv, *gr);
                    }
                    add_into(&mut grads, *q, &gq, 1.0);
                }
                Op::WeightedSum(w, rows) => {
                    let wv = &self.values[w.0];
                    let gw: Vec<f64> = rows.iter().map(|r| dot(&g, &self.values[r.0])).collect();
                    for (wi, r) in wv.iter().zip(rows) {
                        add_into(&mut grads, *r, &g, *wi);
                    }
                    add_into(&mut grads, *w, &gw, 1.0);
                }
                Op::Gather(a, idx) => {
                    let n = self.values[a.0].len();
                    let ga = acc(&mut grads, *a, n);
                    for (gi, &j) in g.iter().zip(idx) {
                        ga[j] += gi;
                    }
                }
                Op::LogSoftmax(a) => {
                    let total: f64 = g.iter().sum();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.values[i])
                        .map(|(gi, ls)| gi - ls.exp() * total)
                        .collect();
                    add_into(&mut grads, *a, &ga, 1.0);
                }
                Op::Softmax(a) => {
                    let y = &self.values[i];
                    let s = dot(&g, y);
                    let ga: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| yi * (gi - s)).collect();
                    add_into(&mut grads, *a, &ga, 1.0);
                }
                Op::Cosine(a, b) => {
                    let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                    let (na, nb) = (norm(av), norm(bv));
                    let c = self.values[i][0];
                    let ga: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| g[0] * (y / (na * nb) - c * x / (na * na)))
                        .collect();
                    let gb: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| g[0] * (x / (na * nb) - c * y / (nb * nb)))
                        .collect();
                    add_into(&mut grads, *a, &ga, 1.0);
                    add_into(&mut grads, *b, &gb, 1.0);
                }
            }
            if matches!(self.ops[i], Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { nodes: grads, params: pgrads }
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], c: f64) {
    let slot = acc(grads, v, g.len());
    axpy(slot, g, c);
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    log_softmax(x).into_iter().map(f64::exp).collect()
}
