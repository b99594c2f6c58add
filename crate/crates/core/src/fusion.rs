//! Reliability-to-token alignment, the decision fusion nets and the two
//! baselines (stream weighting and encoder concatenation).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Blstm, DenseBlock, Linear};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Widths of the three FC blocks in both DFNs.
    pub dfn_widths: [usize; 3],
    pub blstm_layers: usize,
    pub blstm_cells: usize,
    pub dropout: f64,
    /// Hidden widths of the stream-weight predictor.
    pub weightnet_hidden: [usize; 2],
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { dfn_widths: [512, 256, 64], blstm_layers: 1, blstm_cells: 64, dropout: 0.15, weightnet_hidden: [128, 64] }
    }
}

impl FusionConfig {
    pub fn full_scale() -> Self {
        Self { dfn_widths: [8192, 4096, 512], blstm_layers: 3, blstm_cells: 512, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dfn_widths.contains(&0) || self.blstm_cells == 0 || self.weightnet_hidden.contains(&0) {
            return Err(Error::Config("fusion widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("fusion dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Maps frame-rate embeddings `ξ` onto decoder tokens: per head
/// `ξ̃_j = T_j (ξ W_j)`, heads concatenated and projected back to `d_att`.
#[derive(Clone, Debug)]
pub struct TokenAligner {
    /// One `d_att x d_k` projection per head.
    pub heads: Vec<ParamId>,
    pub out: Linear,
    pub d_k: usize,
}

impl TokenAligner {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_att: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_att % heads != 0 {
            return Err(Error::Config(format!("d_att {d_att} not divisible by {heads} heads")));
        }
        let d_k = d_att / heads;
        Ok(Self {
            heads: (0..heads)
                .map(|j| store.get_or_init(&format!("{name}.w{j}"), &[d_att, d_k], Init::Xavier))
                .collect::<Result<_>>()?,
            out: Linear::new(store, &format!("{name}.out"), heads * d_k, d_att)?,
            d_k,
        })
    }

    /// Concatenated per-head products before the output projection.
    pub fn pre_projection<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, xi: Var, transforms: &[Var]) -> Var {
        assert_eq!(transforms.len(), self.heads.len(), "one transform per head");
        let parts: Vec<Var> = self
            .heads
            .iter()
            .zip(transforms)
            .map(|(&w, &t)| {
                let w = g.param(store, w);
                let p = g.matmul(xi, w);
                g.matmul(t, p)
            })
            .collect();
        g.concat_cols(&parts)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, xi: Var, transforms: &[Var]) -> Var {
        let cat = self.pre_projection(g, store, xi, transforms);
        self.out.forward(g, store, cat)
    }
}

fn check_alignment_shapes<S: Scalar>(xi: &Tensor<S>, transforms: &[Tensor<S>], aligner: &TokenAligner) -> Result<()> {
    if transforms.len() != aligner.heads.len() {
        return Err(Error::shape("align_reliability_to_tokens", format!("{} transforms for {} heads", transforms.len(), aligner.heads.len())));
    }
    let n_t = transforms[0].rows();
    for t in transforms {
        if t.cols() != xi.rows() || t.rows() != n_t {
            return Err(Error::shape(
                "align_reliability_to_tokens",
                format!("transform {:?} vs embedding {:?}", t.shape(), xi.shape()),
            ));
        }
    }
    if xi.cols() != aligner.out.d_out {
        return Err(Error::shape("align_reliability_to_tokens", format!("embedding width {} vs {}", xi.cols(), aligner.out.d_out)));
    }
    Ok(())
}

/// `ξ̃` (`N_T x d_att`) from `ξ` (`N_F/4 x d_att`) and the final-block transforms.
pub fn align_reliability_to_tokens<S: Scalar>(
    xi: &Tensor<S>,
    transforms: &[Tensor<S>],
    aligner: &TokenAligner,
    store: &ParamStore<S>,
) -> Result<Tensor<S>> {
    check_alignment_shapes(xi, transforms, aligner)?;
    let mut g = Graph::eval();
    let x = g.input(xi.clone());
    let ts: Vec<Var> = transforms.iter().map(|t| g.input(t.clone())).collect();
    let y = aligner.forward(&mut g, store, x, &ts);
    Ok(g.take_value(y))
}

/// As [`align_reliability_to_tokens`] without the output projection.
pub fn align_pre_projection<S: Scalar>(
    xi: &Tensor<S>,
    transforms: &[Tensor<S>],
    aligner: &TokenAligner,
    store: &ParamStore<S>,
) -> Result<Tensor<S>> {
    check_alignment_shapes(xi, transforms, aligner)?;
    let mut g = Graph::eval();
    let x = g.input(xi.clone());
    let ts: Vec<Var> = transforms.iter().map(|t| g.input(t.clone())).collect();
    let y = aligner.pre_projection(&mut g, store, x, &ts);
    Ok(g.take_value(y))
}

/// Frame-level decision fusion net: FC blocks, BLSTM stack, readout.
#[derive(Clone, Debug)]
pub struct DfnCtc {
    pub dense: Vec<DenseBlock>,
    pub blstm: Vec<Blstm>,
    pub out: Linear,
    pub dropout: f64,
}

/// Input width of either DFN: two log-posterior rows and two embeddings.
pub fn dfn_input_width(vocab: usize, d_att: usize) -> usize {
    2 * vocab + 2 * d_att
}

fn dense_stack<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_in: usize, widths: &[usize; 3]) -> Result<Vec<DenseBlock>> {
    let mut d = d_in;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let b = DenseBlock::new(store, &format!("{name}.fc{i}"), d, w);
            d = w;
            b
        })
        .collect()
}

impl DfnCtc {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, vocab: usize, d_att: usize, cfg: &FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let dense = dense_stack(store, name, dfn_input_width(vocab, d_att), &cfg.dfn_widths)?;
        let mut d = cfg.dfn_widths[2];
        let mut blstm = Vec::with_capacity(cfg.blstm_layers);
        for l in 0..cfg.blstm_layers {
            blstm.push(Blstm::new(store, &format!("{name}.blstm{l}"), d, cfg.blstm_cells)?);
            d = 2 * cfg.blstm_cells;
        }
        Ok(Self { dense, blstm, out: Linear::new(store, &format!("{name}.out"), d, vocab)?, dropout: cfg.dropout })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, inputs: [Var; 4]) -> Var {
        let mut x = g.concat_cols(&inputs);
        for b in &self.dense {
            x = b.forward(g, store, x, self.dropout);
        }
        for l in &self.blstm {
            x = l.forward(g, store, x);
        }
        x = g.dropout(x, self.dropout);
        let y = self.out.forward(g, store, x);
        g.log_softmax(y)
    }
}

/// Token-level decision fusion net: FC blocks and readout, no recurrence.
#[derive(Clone, Debug)]
pub struct DfnS2s {
    pub dense: Vec<DenseBlock>,
    pub out: Linear,
    pub dropout: f64,
}

impl DfnS2s {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, vocab: usize, d_att: usize, cfg: &FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let dense = dense_stack(store, name, dfn_input_width(vocab, d_att), &cfg.dfn_widths)?;
        Ok(Self { dense, out: Linear::new(store, &format!("{name}.out"), cfg.dfn_widths[2], vocab)?, dropout: cfg.dropout })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, inputs: [Var; 4]) -> Var {
        let mut x = g.concat_cols(&inputs);
        for b in &self.dense {
            x = b.forward(g, store, x, self.dropout);
        }
        let y = self.out.forward(g, store, x);
        g.log_softmax(y)
    }
}

fn check_four<S: Scalar>(op: &'static str, what: &str, parts: [&Tensor<S>; 4], vocab: usize, d_att: usize) -> Result<()> {
    let n = parts[0].rows();
    if parts.iter().any(|p| p.rows() != n) {
        let lens: Vec<usize> = parts.iter().map(|p| p.rows()).collect();
        return Err(Error::Length(format!("{op}: all four inputs must share {what}, got lengths {lens:?}")));
    }
    if n == 0 {
        return Err(Error::Empty(op));
    }
    let widths = [parts[0].cols(), parts[1].cols(), parts[2].cols(), parts[3].cols()];
    if widths != [vocab, vocab, d_att, d_att] {
        return Err(Error::shape(op, format!("input widths {widths:?}, expected [{vocab}, {vocab}, {d_att}, {d_att}]")));
    }
    Ok(())
}

fn run_four<S: Scalar>(
    parts: [&Tensor<S>; 4],
    f: impl FnOnce(&mut Graph<S>, [Var; 4]) -> Var,
) -> Tensor<S> {
    let mut g = Graph::eval();
    let vars = parts.map(|p| g.input(p.clone()));
    let y = f(&mut g, vars);
    g.take_value(y)
}

/// Fused frame log-posteriors from both CTC grids and both `ξ`.
pub fn dfn_ctc_forward<S: Scalar>(
    p_a: &Tensor<S>,
    p_v: &Tensor<S>,
    xi_a: &Tensor<S>,
    xi_v: &Tensor<S>,
    net: &DfnCtc,
    store: &ParamStore<S>,
) -> Result<Tensor<S>> {
    let vocab = net.out.d_out;
    let d_att = (net.dense[0].fc.d_in - 2 * vocab) / 2;
    check_four("dfn_ctc_forward", "the subsampled length N_F/4", [p_a, p_v, xi_a, xi_v], vocab, d_att)?;
    Ok(run_four([p_a, p_v, xi_a, xi_v], |g, v| net.forward(g, store, v)))
}

/// Fused token log-posteriors from both decoders and both `ξ̃`.
pub fn dfn_s2s_forward<S: Scalar>(
    p_a: &Tensor<S>,
    p_v: &Tensor<S>,
    xt_a: &Tensor<S>,
    xt_v: &Tensor<S>,
    net: &DfnS2s,
    store: &ParamStore<S>,
) -> Result<Tensor<S>> {
    let vocab = net.out.d_out;
    let d_att = (net.dense[0].fc.d_in - 2 * vocab) / 2;
    check_four("dfn_s2s_forward", "the token count N_T", [p_a, p_v, xt_a, xt_v], vocab, d_att)?;
    Ok(run_four([p_a, p_v, xt_a, xt_v], |g, v| net.forward(g, store, v)))
}

/// Two ReLU layers and a sigmoid unit: one weight in (0, 1) per row.
#[derive(Clone, Copy, Debug)]
pub struct WeightNet {
    pub l1: Linear,
    pub l2: Linear,
    pub out: Linear,
}

impl WeightNet {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_in: usize, hidden: [usize; 2]) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), d_in, hidden[0])?,
            l2: Linear::new(store, &format!("{name}.l2"), hidden[0], hidden[1])?,
            out: Linear::new(store, &format!("{name}.out"), hidden[1], 1)?,
        })
    }

    /// `N x 1` weights.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let h = self.l1.forward(g, store, x);
        let h = g.relu(h);
        let h = self.l2.forward(g, store, h);
        let h = g.relu(h);
        let y = self.out.forward(g, store, h);
        g.sigmoid(y)
    }
}

pub fn weightnet<S: Scalar>(features: &Tensor<S>, net: &WeightNet, store: &ParamStore<S>) -> Result<Vec<S>> {
    if features.cols() != net.l1.d_in {
        return Err(Error::shape("weightnet", format!("width {} vs {}", features.cols(), net.l1.d_in)));
    }
    let mut g = Graph::eval();
    let x = g.input(features.clone());
    let y = net.forward(&mut g, store, x);
    Ok(g.take_value(y).into_data())
}

/// `log_softmax(λa la + λv lv)` row by row.
pub fn stream_weight_fuse<S: Scalar>(la: &Tensor<S>, lv: &Tensor<S>, lambda_a: &[S], lambda_v: &[S]) -> Result<Tensor<S>> {
    if la.shape() != lv.shape() {
        return Err(Error::shape("stream_weight_fuse", format!("{:?} vs {:?}", la.shape(), lv.shape())));
    }
    if lambda_a.len() != la.rows() || lambda_v.len() != la.rows() {
        return Err(Error::Length(format!("{} rows but {}/{} weights", la.rows(), lambda_a.len(), lambda_v.len())));
    }
    let mut out = la.clone();
    for r in 0..out.rows() {
        for (o, &v) in out.row_mut(r).iter_mut().zip(lv.row(r)) {
            *o = lambda_a[r] * *o + lambda_v[r] * v;
        }
        let norm = crate::functional::log_softmax(out.row(r))?;
        out.row_mut(r).copy_from_slice(&norm);
    }
    Ok(out)
}

/// Graph form of [`stream_weight_fuse`] with `λv = 1 - λa`; `lambda_a` is `N x 1`.
pub fn stream_weight_fuse_graph<S: Scalar>(g: &mut Graph<S>, la: Var, lv: Var, lambda_a: Var) -> Var {
    let (n, v) = g.shape(la);
    let ones_row = g.input(Tensor::filled(&[1, v], S::one()));
    let wa = g.matmul(lambda_a, ones_row);
    let all_ones = g.input(Tensor::filled(&[n, v], S::one()));
    let wv = g.sub(all_ones, wa);
    let a = g.mul(wa, la);
    let b = g.mul(wv, lv);
    let s = g.add(a, b);
    g.log_softmax(s)
}

/// Stream-weighting baseline: convex weights `λa`, `1 - λa` predicted from
/// the concatenated reliability embeddings of both streams.
#[derive(Clone, Debug)]
pub struct StreamWeightFusion {
    pub ctc: WeightNet,
    pub s2s: WeightNet,
}

impl StreamWeightFusion {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_att: usize, cfg: &FusionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            ctc: WeightNet::new(store, &format!("{name}.ctc"), 2 * d_att, cfg.weightnet_hidden)?,
            s2s: WeightNet::new(store, &format!("{name}.s2s"), 2 * d_att, cfg.weightnet_hidden)?,
        })
    }

    pub fn fuse<S: Scalar>(
        &self,
        net: &WeightNet,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        la: Var,
        lv: Var,
        xi_a: Var,
        xi_v: Var,
    ) -> Var {
        let x = g.concat_cols(&[xi_a, xi_v]);
        let lam = net.forward(g, store, x);
        stream_weight_fuse_graph(g, la, lv, lam)
    }
}

/// AV baseline front: frame-wise `[h_a ; h_v]` projected to `d_att`.
#[derive(Clone, Copy, Debug)]
pub struct ConcatFusion {
    pub proj: Linear,
}

impl ConcatFusion {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_att: usize) -> Result<Self> {
        Ok(Self { proj: Linear::new(store, &format!("{name}.proj"), 2 * d_att, d_att)? })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, ha: Var, hv: Var) -> Var {
        let x = g.concat_cols(&[ha, hv]);
        self.proj.forward(g, store, x)
    }
}

pub fn concat_baseline_fuse<S: Scalar>(ha: &Tensor<S>, hv: &Tensor<S>, net: &ConcatFusion, store: &ParamStore<S>) -> Result<Tensor<S>> {
    if ha.rows() != hv.rows() {
        return Err(Error::Length(format!("audio encoder has {} frames, video {}", ha.rows(), hv.rows())));
    }
    if ha.cols() + hv.cols() != net.proj.d_in {
        return Err(Error::shape("concat_baseline_fuse", format!("widths {} + {} vs {}", ha.cols(), hv.cols(), net.proj.d_in)));
    }
    let mut g = Graph::eval();
    let (a, v) = (g.input(ha.clone()), g.input(hv.clone()));
    let y = net.forward(&mut g, store, a, v);
    Ok(g.take_value(y))
}
