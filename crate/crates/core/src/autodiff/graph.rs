//! Tape-style reverse-mode differentiation over matrix-valued nodes.
//!
//! Every op appends a node holding its forward value. Nodes are appended in
//! topological order, so `backward` is a single reverse sweep that visits each
//! node once. Leaves created with [`Graph::param`] route their gradient into a
//! [`Gradients`] accumulator keyed by [`ParamId`].
//!
//! Shape errors inside an op are programming errors and panic; the public model
//! functions validate user-facing shapes before they reach the graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::functional::{log_softmax_in_place, normalize, sigmoid, softmax_in_place};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

enum Op<S> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSoftmax(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, inv: Vec<S> },
    MaskMul(Var, Vec<S>),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    PickSum { x: Var, idx: Vec<usize> },
    /// Scalar output with a gradient with respect to `x` computed during the forward pass.
    ScalarFn { x: Var, grad: Tensor<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    mode: Mode,
    dropout_calls: u64,
}

impl<S: Scalar> Graph<S> {
    pub fn new(mode: Mode) -> Self {
        Self { nodes: Vec::new(), mode, dropout_calls: 0 }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn train(seed: u64) -> Self {
        Self::new(Mode::Train { seed })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&self, v: Var) -> Tensor<S> {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Parameter leaf; frozen parameters behave like constants.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let needs = store.is_trainable(id);
        self.push(store.value(id).clone(), Op::Param(id), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b)).unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x c` (or rank-1 length-`c`) row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        let rv = self.value(row);
        assert_eq!(rv.len(), c, "add_row: row has {} entries, matrix has {c} columns", rv.len());
        let mut out = self.value(a).clone();
        for i in 0..r {
            for (o, &b) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let out = Tensor::matrix(r, c, out.into_data());
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let value = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let rows = value.rows();
        for r in 0..rows {
            log_softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    /// Row-wise softmax. With `causal`, row `i` only covers columns `0..=i`
    /// and the remaining entries are exactly zero.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let mut value = self.value(a).clone();
        let (rows, cols) = (value.rows(), value.cols());
        for r in 0..rows {
            let active = if causal { (r + 1).min(cols) } else { cols };
            softmax_in_place(value.row_mut(r), active);
        }
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Row-wise layer normalisation with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.value(gain).len(), c, "layer_norm gain length");
        assert_eq!(self.value(bias).len(), c, "layer_norm bias length");
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        {
            let xv = self.value(x);
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for i in 0..r {
                let (h, iv) = normalize(xv.row(i), eps);
                for j in 0..c {
                    out.push(g[j] * h[j] + b[j]);
                }
                xhat.extend(h);
                inv.push(iv);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(Tensor::matrix(r, c, out), Op::LayerNorm { x, gain, bias, xhat, inv }, ng)
    }

    /// Inverted dropout. Identity in eval mode or for `rate == 0`.
    ///
    /// The mask comes from a ChaCha stream selected by the call index, so a
    /// graph built twice with the same seed draws the same masks.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        let seed = match self.mode {
            Mode::Train { seed } if rate > 0.0 => seed,
            _ => return a,
        };
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let mask = dropout_mask::<S>(seed, call, self.value(a).len(), rate);
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        )
        .expect("same extents");
        let ng = self.ng(a);
        self.push(value, Op::MaskMul(a, mask), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let value = {
            let ts: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_cols(&ts).unwrap_or_else(|e| panic!("{e}"))
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_cols(start, len);
        let ng = self.ng(x);
        self.push(value, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let value = {
            let ts: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_rows(&ts).unwrap_or_else(|e| panic!("{e}"))
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let value = self.value(x).gather_rows(idx);
        let ng = self.ng(x);
        self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    pub fn row(&mut self, x: Var, r: usize) -> Var {
        self.gather_rows(x, &[r])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    /// Sum of the entries at `(row, col)` positions, as a scalar.
    pub fn pick_sum(&mut self, x: Var, positions: &[(usize, usize)]) -> Var {
        let cols = self.value(x).cols();
        let idx: Vec<usize> = positions.iter().map(|&(r, c)| r * cols + c).collect();
        let value = Tensor::scalar(idx.iter().map(|&i| self.value(x).data()[i]).sum());
        let ng = self.ng(x);
        self.push(value, Op::PickSum { x, idx }, ng)
    }

    /// Records a scalar function of `x` whose gradient the caller already computed.
    pub fn scalar_fn(&mut self, x: Var, value: S, grad: Tensor<S>) -> Var {
        assert_eq!(grad.shape(), self.value(x).shape(), "scalar_fn gradient shape");
        let ng = self.ng(x);
        self.push(Tensor::scalar(value), Op::ScalarFn { x, grad }, ng)
    }

    /// Reverse sweep from a scalar `loss`, adding parameter gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<S>) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor<S>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::filled(lv.shape(), S::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj, grads);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, adj: &mut [Option<Tensor<S>>], grads: &mut Gradients<S>) {
        let mut send = |v: Var, t: Tensor<S>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => grads.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let mut ga = vec![S::zero(); m * k];
                    matmul_nt_into(g.data(), bv.data(), &mut ga, m, k, n);
                    send(*a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                }
                if self.ng(*b) {
                    let mut gb = vec![S::zero(); k * n];
                    matmul_tn_into(av.data(), g.data(), &mut gb, m, k, n);
                    send(*b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                send(*a, Tensor::new(self.value(*a).shape().to_vec(), g.data().to_vec()).unwrap());
                if self.ng(*row) {
                    let c = g.cols();
                    let mut acc = vec![S::zero(); c];
                    for r in 0..g.rows() {
                        for (o, &x) in acc.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    send(*row, Tensor::new(self.value(*row).shape().to_vec(), acc).unwrap());
                }
            }
            Op::Scale(a, k) => send(*a, g.map(|x| x * *k)),
            Op::Relu(a) => {
                send(*a, g.zip_map(self.value(*a), |gv, x| if x > S::zero() { gv } else { S::zero() }));
            }
            Op::Tanh(_) | Op::Sigmoid(_) => {
                let (a, y) = match &node.op {
                    Op::Tanh(a) | Op::Sigmoid(a) => (*a, &node.value),
                    _ => unreachable!(),
                };
                let tanh = matches!(node.op, Op::Tanh(_));
                send(
                    a,
                    g.zip_map(y, |gv, yv| if tanh { gv * (S::one() - yv * yv) } else { gv * yv * (S::one() - yv) }),
                );
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut out = g.clone();
                for r in 0..y.rows() {
                    let gsum: S = g.row(r).iter().copied().sum();
                    for (o, &yv) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= yv.exp() * gsum;
                    }
                }
                send(*a, out);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut out = g.clone();
                for r in 0..y.rows() {
                    let dot: S = g.row(r).iter().zip(y.row(r)).map(|(&gv, &yv)| gv * yv).sum();
                    for (o, &yv) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o = yv * (*o - dot);
                    }
                }
                send(*a, out);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv } => {
                let (r, c) = (g.rows(), g.cols());
                let gv = self.value(*gain).data();
                if self.ng(*x) {
                    let cs = S::from_usize_lossy(c);
                    let mut gx = vec![S::zero(); r * c];
                    for i in 0..r {
                        let gr = g.row(i);
                        let h = &xhat[i * c..(i + 1) * c];
                        let dh: Vec<S> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<S>() / cs;
                        let mean_dh_h = dh.iter().zip(h).map(|(&a, &b)| a * b).sum::<S>() / cs;
                        for j in 0..c {
                            gx[i * c + j] = inv[i] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                    send(*x, Tensor::new(self.value(*x).shape().to_vec(), gx).unwrap());
                }
                if self.ng(*gain) {
                    let mut gg = vec![S::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g.at(i, j) * xhat[i * c + j];
                        }
                    }
                    send(*gain, Tensor::new(self.value(*gain).shape().to_vec(), gg).unwrap());
                }
                if self.ng(*bias) {
                    let mut gb = vec![S::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g.at(i, j);
                        }
                    }
                    send(*bias, Tensor::new(self.value(*bias).shape().to_vec(), gb).unwrap());
                }
            }
            Op::MaskMul(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(&x, &m)| x * m).collect();
                send(*a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let piece = g.slice_cols(start, w);
                        send(p, Tensor::new(self.value(p).shape().to_vec(), piece.into_data()).unwrap());
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let w = g.cols();
                let mut out = vec![S::zero(); r * c];
                for i in 0..r {
                    out[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                send(*x, Tensor::new(xv.shape().to_vec(), out).unwrap());
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.ng(p) {
                        let piece = g.slice_rows(start, h);
                        send(p, Tensor::new(self.value(p).shape().to_vec(), piece.into_data()).unwrap());
                    }
                    start += h;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut out = vec![S::zero(); xv.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                send(*x, Tensor::new(xv.shape().to_vec(), out).unwrap());
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                send(*x, Tensor::filled(self.value(*x).shape(), s));
            }
            Op::PickSum { x, idx } => {
                let s = g.data()[0];
                let mut out = Tensor::zeros(self.value(*x).shape());
                for &i in idx {
                    out.data_mut()[i] += s;
                }
                send(*x, out);
            }
            Op::ScalarFn { x, grad } => {
                let s = g.data()[0];
                send(*x, grad.map(|v| v * s));
            }
        }
    }
}

/// Keep/scale mask for inverted dropout: `0` with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<S: Scalar>(seed: u64, call: u64, n: usize, rate: f64) -> Vec<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(call);
    let keep = S::lit(1.0 / (1.0 - rate));
    (0..n).map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep }).collect()
}
