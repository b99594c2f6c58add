//! Reusable layers built on the autodiff graph.

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::functional::sigmoid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.get_or_init(&format!("{name}.w"), &[d_in, d_out], Init::Xavier)?,
            b: store.get_or_init(&format!("{name}.b"), &[d_out], Init::Zeros)?,
            d_in,
            d_out,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.get_or_init(&format!("{name}.gain"), &[dim], Init::Ones)?,
            bias: store.get_or_init(&format!("{name}.bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, S::lit(LN_EPS))
    }
}

/// Position-wise feed-forward: `W2 relu(W1 x)`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), dim, hidden)?,
            l2: Linear::new(store, &format!("{name}.l2"), hidden, dim)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, dropout: f64) -> Var {
        let h = self.l1.forward(g, store, x);
        let h = g.relu(h);
        let h = g.dropout(h, dropout);
        self.l2.forward(g, store, h)
    }
}

/// FC -> ReLU -> LN -> dropout.
#[derive(Clone, Copy, Debug)]
pub struct DenseBlock {
    pub fc: Linear,
    pub ln: LayerNorm,
}

impl DenseBlock {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(store, &format!("{name}.fc"), d_in, d_out)?,
            ln: LayerNorm::new(store, &format!("{name}.ln"), d_out)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, dropout: f64) -> Var {
        let h = self.fc.forward(g, store, x);
        let h = g.relu(h);
        let h = self.ln.forward(g, store, h);
        g.dropout(h, dropout)
    }
}

/// Single-direction LSTM layer. Gate blocks inside `w_ih`, `w_hh` and `b`
/// are ordered `[input, forget, cell, output]`, each `cells` wide.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub cells: usize,
}

/// Recurrent state of one LSTM layer as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_in: usize, cells: usize) -> Result<Self> {
        let limit = 1.0 / (cells as f64).sqrt();
        Ok(Self {
            w_ih: store.get_or_init(&format!("{name}.w_ih"), &[d_in, 4 * cells], Init::Uniform(limit))?,
            w_hh: store.get_or_init(&format!("{name}.w_hh"), &[cells, 4 * cells], Init::Uniform(limit))?,
            b: store.get_or_init(&format!("{name}.b"), &[4 * cells], Init::Zeros)?,
            d_in,
            cells,
        })
    }

    pub fn zero_state<S: Scalar>(&self, g: &mut Graph<S>) -> LstmState {
        let h = g.input(Tensor::zeros(&[1, self.cells]));
        let c = g.input(Tensor::zeros(&[1, self.cells]));
        LstmState { h, c }
    }

    /// One step given the already projected input row `x W_ih + b` (`1 x 4c`).
    pub fn step_projected<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        w_hh: Var,
        pre_x: Var,
        state: Option<LstmState>,
    ) -> LstmState {
        let c = self.cells;
        let pre = match state {
            Some(s) => {
                let hh = g.matmul(s.h, w_hh);
                g.add(pre_x, hh)
            }
            None => pre_x,
        };
        let i = g.slice_cols(pre, 0, c);
        let f = g.slice_cols(pre, c, c);
        let z = g.slice_cols(pre, 2 * c, c);
        let o = g.slice_cols(pre, 3 * c, c);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let z = g.tanh(z);
        let o = g.sigmoid(o);
        let iz = g.mul(i, z);
        let cell = match state {
            Some(s) => {
                let fc = g.mul(f, s.c);
                g.add(fc, iz)
            }
            None => iz,
        };
        let tc = g.tanh(cell);
        let h = g.mul(o, tc);
        LstmState { h, c: cell }
    }

    /// Runs over all rows of `x` (`T x d_in`), forwards or backwards in time.
    /// Row `t` of the result is the hidden state after consuming input `t`.
    pub fn forward_seq<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, reverse: bool) -> Var {
        let t_len = g.shape(x).0;
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w_ih);
        let xw = g.add_row(xw, b);
        let mut outs = vec![None; t_len];
        let mut state = None;
        let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
        for t in order {
            let pre = g.row(xw, t);
            let s = self.step_projected(g, w_hh, pre, state);
            outs[t] = Some(s.h);
            state = Some(s);
        }
        let outs: Vec<Var> = outs.into_iter().map(|v| v.expect("every step visited")).collect();
        g.concat_rows(&outs)
    }
}

/// Bidirectional LSTM layer: `[forward ; backward]` hidden states per frame.
#[derive(Clone, Copy, Debug)]
pub struct Blstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl Blstm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_in: usize, cells: usize) -> Result<Self> {
        Ok(Self {
            fwd: Lstm::new(store, &format!("{name}.fwd"), d_in, cells)?,
            bwd: Lstm::new(store, &format!("{name}.bwd"), d_in, cells)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let f = self.fwd.forward_seq(g, store, x, false);
        let b = self.bwd.forward_seq(g, store, x, true);
        g.concat_cols(&[f, b])
    }
}

/// Evaluates a stack of BLSTM layers on `seq` (`T x d`), returning `T x 2c`.
pub fn blstm_forward<S: Scalar>(seq: &Tensor<S>, layers: &[Blstm], store: &ParamStore<S>) -> Result<Tensor<S>> {
    if seq.rows() == 0 {
        return Err(crate::error::Error::Empty("blstm_forward"));
    }
    if let Some(first) = layers.first() {
        if first.fwd.d_in != seq.cols() {
            return Err(crate::error::Error::shape(
                "blstm_forward",
                format!("input width {} vs layer input {}", seq.cols(), first.fwd.d_in),
            ));
        }
    }
    let mut g = Graph::eval();
    let mut x = g.input(seq.clone());
    for layer in layers {
        x = layer.forward(&mut g, store, x);
    }
    Ok(g.take_value(x))
}

/// Graph-free LSTM step used by incremental scorers: returns `(h, c)`.
pub fn lstm_step_values<S: Scalar>(
    layer: &Lstm,
    store: &ParamStore<S>,
    x: &[S],
    h: &[S],
    c: &[S],
) -> (Vec<S>, Vec<S>) {
    let n = layer.cells;
    let w_ih = store.value(layer.w_ih);
    let w_hh = store.value(layer.w_hh);
    let mut pre = store.value(layer.b).data().to_vec();
    for (k, &xv) in x.iter().enumerate() {
        if xv == S::zero() {
            continue;
        }
        for (p, &w) in pre.iter_mut().zip(w_ih.row(k)) {
            *p += xv * w;
        }
    }
    for (k, &hv) in h.iter().enumerate() {
        if hv == S::zero() {
            continue;
        }
        for (p, &w) in pre.iter_mut().zip(w_hh.row(k)) {
            *p += hv * w;
        }
    }
    let mut h_new = vec![S::zero(); n];
    let mut c_new = vec![S::zero(); n];
    for j in 0..n {
        let i = sigmoid(pre[j]);
        let f = sigmoid(pre[n + j]);
        let z = pre[2 * n + j].tanh();
        let o = sigmoid(pre[3 * n + j]);
        c_new[j] = f * c[j] + i * z;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;

    fn seq(t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..t * d)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::matrix(t, d, data)
    }

    #[test]
    fn blstm_single_frame_uses_same_input_both_ways() {
        let mut store = ParamStore::<f64>::new(2);
        let layer = Blstm::new(&mut store, "b", 3, 2).unwrap();
        let out = blstm_forward(&seq(1, 3, 1), &[layer], &store).unwrap();
        assert_eq!(out.shape(), &[1, 4]);
        // With one frame each direction is a single step from the zero state.
        let x = seq(1, 3, 1);
        let (hf, _) = lstm_step_values(&layer.fwd, &store, x.row(0), &[0.0; 2], &[0.0; 2]);
        let (hb, _) = lstm_step_values(&layer.bwd, &store, x.row(0), &[0.0; 2], &[0.0; 2]);
        assert_eq!(&out.row(0)[..2], hf.as_slice());
        assert_eq!(&out.row(0)[2..], hb.as_slice());
    }

    #[test]
    fn blstm_zero_everything_is_zero() {
        let mut store = ParamStore::<f64>::new(0);
        let layer = Blstm::new(&mut store, "b", 3, 4).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let out = blstm_forward(&Tensor::zeros(&[5, 3]), &[layer], &store).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blstm_halves_are_causal_and_anticausal() {
        let mut store = ParamStore::<f64>::new(4);
        let layer = Blstm::new(&mut store, "b", 3, 3).unwrap();
        let x = seq(6, 3, 9);
        let base = blstm_forward(&x, &[layer], &store).unwrap();
        let t = 2;
        let mut pert = x.clone();
        for v in pert.row_mut(t + 1) {
            *v += 0.75;
        }
        let out = blstm_forward(&pert, &[layer], &store).unwrap();
        for r in 0..=t {
            assert_eq!(&out.row(r)[..3], &base.row(r)[..3], "forward half changed at {r}");
        }
        for r in t + 2..6 {
            assert_eq!(&out.row(r)[3..], &base.row(r)[3..], "backward half changed at {r}");
        }
        assert_ne!(&out.row(t)[3..], &base.row(t)[3..]);
    }

    #[test]
    fn graph_lstm_matches_value_step() {
        let mut store = ParamStore::<f64>::new(8);
        let lstm = Lstm::new(&mut store, "l", 2, 3).unwrap();
        let x = seq(3, 2, 4);
        let mut g = Graph::eval();
        let xv = g.input(x.clone());
        let out = lstm.forward_seq(&mut g, &store, xv, false);
        let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
        for t in 0..3 {
            let (h2, c2) = lstm_step_values(&lstm, &store, x.row(t), &h, &c);
            h = h2;
            c = c2;
            for j in 0..3 {
                assert!((g.value(out).at(t, j) - h[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn layers_pass_gradient_check() {
        let mut store = ParamStore::<f64>::new(11);
        let dense = DenseBlock::new(&mut store, "d", 3, 5).unwrap();
        let blstm = Blstm::new(&mut store, "b", 5, 2).unwrap();
        let ff = FeedForward::new(&mut store, "f", 4, 6).unwrap();
        let out = Linear::new(&mut store, "o", 4, 3).unwrap();
        // Scaled up so no post-ReLU row has a variance near the step size.
        let x = seq(4, 3, 3).map(|v| 4.0 * v);
        let report = check_gradients(&store, 1e-4, 12, |g, s| {
            let xv = g.input(x.clone());
            let h = dense.forward(g, s, xv, 0.0);
            let h = blstm.forward(g, s, h);
            let h2 = ff.forward(g, s, h, 0.0);
            let h = g.add(h, h2);
            let y = out.forward(g, s, h);
            let y = g.tanh(y);
            let y = g.log_softmax(y);
            Ok(g.pick_sum(y, &[(0, 1), (2, 0), (3, 2)]))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}

/// Per-column mean/std stored as non-trainable buffers `{name}.mean` and `{name}.std`.
#[derive(Clone, Copy, Debug)]
pub struct Standardizer {
    pub mean: ParamId,
    pub std: ParamId,
}

impl Standardizer {
    /// Starts as mean 0 / std 1 unless the buffers already exist.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize) -> Result<Self> {
        let mean = match store.id(&format!("{name}.mean")) {
            Ok(id) => id,
            Err(_) => store.insert_buffer(&format!("{name}.mean"), Tensor::zeros(&[width])),
        };
        let std = match store.id(&format!("{name}.std")) {
            Ok(id) => id,
            Err(_) => store.insert_buffer(&format!("{name}.std"), Tensor::filled(&[width], S::one())),
        };
        if store.value(mean).len() != width || store.value(std).len() != width {
            return Err(Error::shape("Standardizer", format!("stored statistics do not have width {width}")));
        }
        Ok(Self { mean, std })
    }

    pub fn width<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        store.value(self.mean).len()
    }

    /// Fits per-column mean and standard deviation (floored at 1e-6) over the rows of `data`.
    pub fn fit<S: Scalar>(&self, store: &mut ParamStore<S>, data: &[&Tensor<S>]) -> Result<()> {
        let w = self.width(store);
        let mut n = 0usize;
        let mut sum = vec![0.0f64; w];
        for t in data {
            if t.cols() != w {
                return Err(Error::shape("Standardizer::fit", format!("width {} vs {w}", t.cols())));
            }
            for r in 0..t.rows() {
                for (s, v) in sum.iter_mut().zip(t.row(r)) {
                    *s += v.as_f64();
                }
            }
            n += t.rows();
        }
        if n == 0 {
            return Err(Error::Empty("Standardizer::fit"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0f64; w];
        for t in data {
            for r in 0..t.rows() {
                for ((acc, v), m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                    *acc += (v.as_f64() - m).powi(2);
                }
            }
        }
        let std: Vec<S> = var.iter().map(|v| S::lit((v / n as f64).sqrt().max(1e-6))).collect();
        *store.value_mut(self.mean) = Tensor::new(vec![w], mean.into_iter().map(S::lit).collect())?;
        *store.value_mut(self.std) = Tensor::new(vec![w], std)?;
        Ok(())
    }

    pub fn apply<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Tensor<S> {
        let mean = store.value(self.mean).data();
        let std = store.value(self.std).data();
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) / std[j];
            }
        }
        out
    }
}
