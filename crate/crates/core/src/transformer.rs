//! Transformer encoders and decoders whose attention blocks expose their
//! per-head attention transform matrices.
//!
//! Blocks are pre-LN: `x + Sublayer(LN(x))`, with a final LN per stack.
//! Sinusoidal positions are added after subsampling (encoders) and after the
//! token embedding (decoder).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Var};
use crate::ctc::PosteriorGrid;
use crate::error::{Error, Result};
use crate::functional::softmax;
use crate::nn::{FeedForward, LayerNorm, Linear, Standardizer};
use crate::scalar::Scalar;
use crate::streams::{subsampled_len, FeatureStream, Modality, Subsample4};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_att: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Self-attention blocks in the CTC decoder; 0 reads out `h` linearly.
    pub ctc_blocks: usize,
    pub ff_dim: usize,
    /// Token inventory size including blank (id 0) and sos/eos (last id).
    pub vocab: usize,
    pub dropout: f64,
}

/// Desk scale over a twelve-token inventory.
impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(12)
    }
}

impl ModelConfig {
    pub fn desk(vocab: usize) -> Self {
        Self { d_att: 32, heads: 4, encoder_blocks: 2, decoder_blocks: 2, ctc_blocks: 1, ff_dim: 128, vocab, dropout: 0.1 }
    }

    pub fn full_scale(vocab: usize) -> Self {
        Self { d_att: 256, heads: 4, encoder_blocks: 12, decoder_blocks: 6, ctc_blocks: 6, ff_dim: 2048, vocab, dropout: 0.1 }
    }

    pub fn d_k(&self) -> usize {
        self.d_att / self.heads
    }

    pub fn blank(&self) -> usize {
        0
    }

    pub fn sos(&self) -> usize {
        self.vocab - 1
    }

    pub fn eos(&self) -> usize {
        self.vocab - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_att == 0 || self.d_att % self.heads != 0 {
            return Err(Error::Config(format!("d_att {} must be a positive multiple of heads {}", self.d_att, self.heads)));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err(Error::Config("encoder_blocks and decoder_blocks must be >= 1".into()));
        }
        if self.ff_dim == 0 {
            return Err(Error::Config("ff_dim must be >= 1".into()));
        }
        if self.vocab < 3 {
            return Err(Error::Config(format!("vocab {} needs blank, sos/eos and one label", self.vocab)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Row-stochastic query-by-key matrix of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTransform<S> {
    pub matrix: Tensor<S>,
    pub head: usize,
    pub block: usize,
}

impl<S: Scalar> AttentionTransform<S> {
    /// Largest deviation of a row sum from one, or a negative entry's magnitude.
    pub fn stochastic_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.matrix.rows() {
            let row = self.matrix.row(r);
            let neg = row.iter().map(|v| (-v.as_f64()).max(0.0)).fold(0.0, f64::max);
            let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
            worst = worst.max(neg).max((sum - 1.0).abs());
        }
        worst
    }
}

/// `softmax((Q Wq)(K Wk)^T / sqrt(d_k))` for one head with projection
/// matrices `Wq, Wk: d_att x d_k`.
pub fn attention_transform<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, wq: &Tensor<S>, wk: &Tensor<S>) -> Result<Tensor<S>> {
    if q.cols() != wq.rows() || k.cols() != wk.rows() || wq.cols() != wk.cols() {
        return Err(Error::shape(
            "attention_transform",
            format!("Q {:?} Wq {:?} K {:?} Wk {:?}", q.shape(), wq.shape(), k.shape(), wk.shape()),
        ));
    }
    let qp = q.matmul(wq)?;
    let kp = k.matmul(wk)?;
    let scale = S::one() / S::from_usize_lossy(wq.cols()).sqrt();
    let scores = qp.matmul(&kp.transpose())?;
    let mut out = Vec::with_capacity(scores.len());
    for r in 0..scores.rows() {
        let row: Vec<S> = scores.row(r).iter().map(|&v| v * scale).collect();
        out.extend(softmax(&row)?);
    }
    Ok(Tensor::matrix(scores.rows(), scores.cols(), out))
}

/// Head output `T (V Wv)`, `N_Q x d_k`.
pub fn attention_apply<S: Scalar>(t: &Tensor<S>, v: &Tensor<S>, wv: &Tensor<S>) -> Result<Tensor<S>> {
    if t.cols() != v.rows() {
        return Err(Error::shape("attention_apply", format!("transform {:?} vs values {:?}", t.shape(), v.shape())));
    }
    t.matmul(&v.matmul(wv)?)
}

/// Multi-head attention with fused `d_att x d_att` projections; head `j`
/// uses columns `j d_k .. (j+1) d_k` of each projection.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_att: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_att % heads != 0 {
            return Err(Error::Config(format!("d_att {d_att} not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.q"), d_att, d_att)?,
            wk: Linear::new(store, &format!("{name}.k"), d_att, d_att)?,
            wv: Linear::new(store, &format!("{name}.v"), d_att, d_att)?,
            wo: Linear::new(store, &format!("{name}.o"), d_att, d_att)?,
            heads,
        })
    }

    pub fn d_k(&self) -> usize {
        self.wq.d_out / self.heads
    }

    /// Returns the projected output and one transform per head (post-softmax,
    /// before attention dropout). With `causal`, query `i` sees keys `0..=i`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        xq: Var,
        xkv: Var,
        causal: bool,
        dropout: f64,
    ) -> (Var, Vec<Var>) {
        let dk = self.d_k();
        let q = self.wq.forward(g, store, xq);
        let k = self.wk.forward(g, store, xkv);
        let v = self.wv.forward(g, store, xkv);
        let scale = S::one() / S::from_usize_lossy(dk).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut transforms = Vec::with_capacity(self.heads);
        for j in 0..self.heads {
            let qj = g.slice_cols(q, j * dk, dk);
            let kj = g.slice_cols(k, j * dk, dk);
            let vj = g.slice_cols(v, j * dk, dk);
            let kt = g.transpose(kj);
            let s = g.matmul(qj, kt);
            let s = g.scale(s, scale);
            let t = g.softmax(s, causal);
            transforms.push(t);
            let td = g.dropout(t, dropout);
            outs.push(g.matmul(td, vj));
        }
        let cat = g.concat_cols(&outs);
        (self.wo.forward(g, store, cat), transforms)
    }
}

/// Sinusoidal position table, `n x d`.
pub fn positional_encoding<S: Scalar>(n: usize, d: usize) -> Tensor<S> {
    let mut t = Tensor::zeros(&[n, d]);
    for pos in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            t.set(pos, i, S::lit(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    t
}

fn add_positions<S: Scalar>(g: &mut Graph<S>, x: Var) -> Var {
    let (n, d) = g.shape(x);
    let pe = g.input(positional_encoding(n, d));
    g.add(x, pe)
}

/// Self-attention + feed-forward block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d_att)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d_att, cfg.heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d_att)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg.d_att, cfg.ff_dim)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, dropout: f64) -> (Var, Vec<Var>) {
        let n = self.ln1.forward(g, store, x);
        let (a, ts) = self.attn.forward(g, store, n, n, false, dropout);
        let a = g.dropout(a, dropout);
        let x = g.add(x, a);
        let n = self.ln2.forward(g, store, x);
        let f = self.ff.forward(g, store, n, dropout);
        let f = g.dropout(f, dropout);
        (g.add(x, f), ts)
    }
}

/// Encoder output `h^i` at the subsampled rate.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<S> {
    pub h: Tensor<S>,
    pub modality: Modality,
}

/// Subsampling, positions, self-attention stack, final LN.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub sub: Subsample4,
    pub blocks: Vec<EncoderBlock>,
    pub ln_out: LayerNorm,
    pub dropout: f64,
}

impl Encoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_in: usize, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            sub: Subsample4::new(store, &format!("{name}.sub"), d_in, cfg.d_att)?,
            blocks: (0..cfg.encoder_blocks)
                .map(|b| EncoderBlock::new(store, &format!("{name}.block{b}"), cfg))
                .collect::<Result<_>>()?,
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), cfg.d_att)?,
            dropout: cfg.dropout,
        })
    }

    pub fn d_in(&self) -> usize {
        self.sub.d_in()
    }

    /// `x` is `N x d_in` with `N >= 4`. Returns `h` and every block's transforms.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> (Var, Vec<Vec<Var>>) {
        let h = self.sub.forward(g, store, x);
        let mut h = add_positions(g, h);
        h = g.dropout(h, self.dropout);
        let mut all = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, ts) = b.forward(g, store, h, self.dropout);
            h = next;
            all.push(ts);
        }
        (self.ln_out.forward(g, store, h), all)
    }
}

pub fn encoder_forward<S: Scalar>(stream: &FeatureStream<S>, enc: &Encoder, store: &ParamStore<S>) -> Result<EncoderOutput<S>> {
    if stream.len() < 4 {
        return Err(Error::Length(format!("stream of {} frames is too short for 4x subsampling", stream.len())));
    }
    if stream.dim() != enc.d_in() {
        return Err(Error::shape("encoder_forward", format!("stream width {} vs encoder input {}", stream.dim(), enc.d_in())));
    }
    let mut g = Graph::eval();
    let x = g.input(stream.frames().clone());
    let (h, _) = enc.forward(&mut g, store, x);
    debug_assert_eq!(g.shape(h).0, subsampled_len(stream.len()));
    Ok(EncoderOutput { h: g.take_value(h), modality: stream.modality() })
}

/// Standardisation with stored statistics, then a two-layer projection to
/// `d_att`. Input rows are already at the subsampled rate (see
/// [`crate::reliability::assemble_reliability`]); there is no attention.
#[derive(Clone, Copy, Debug)]
pub struct ReliabilityEncoder {
    pub norm: Standardizer,
    pub l1: Linear,
    pub l2: Linear,
}

impl ReliabilityEncoder {
    /// Statistics start as mean 0 / std 1; see [`ReliabilityEncoder::set_stats`].
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize, d_att: usize) -> Result<Self> {
        Ok(Self {
            norm: Standardizer::new(store, &format!("{name}.stats"), width)?,
            l1: Linear::new(store, &format!("{name}.l1"), width, d_att)?,
            l2: Linear::new(store, &format!("{name}.l2"), d_att, d_att)?,
        })
    }

    pub fn width(&self) -> usize {
        self.l1.d_in
    }

    pub fn set_stats<S: Scalar>(&self, store: &mut ParamStore<S>, data: &[&Tensor<S>]) -> Result<()> {
        self.norm.fit(store, data)
    }

    pub fn standardize<S: Scalar>(&self, store: &ParamStore<S>, r: &Tensor<S>) -> Tensor<S> {
        self.norm.apply(store, r)
    }

    /// `r` is the raw assembled reliability matrix; standardisation is a constant transform.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, r: &Tensor<S>) -> Var {
        let x = g.input(self.standardize(store, r));
        let h = self.l1.forward(g, store, x);
        let h = g.relu(h);
        self.l2.forward(g, store, h)
    }
}

/// `ξ^i` for one assembled reliability stream.
pub fn reliability_encoder_forward<S: Scalar>(r: &Tensor<S>, enc: &ReliabilityEncoder, store: &ParamStore<S>) -> Result<Tensor<S>> {
    if r.rows() == 0 {
        return Err(Error::Empty("reliability_encoder_forward"));
    }
    if r.cols() != enc.width() {
        return Err(Error::shape("reliability_encoder_forward", format!("width {} vs {}", r.cols(), enc.width())));
    }
    let mut g = Graph::eval();
    let y = enc.forward(&mut g, store, r);
    Ok(g.take_value(y))
}

/// Masked self-attention, cross-attention over `h`, feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d_att)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), cfg.d_att, cfg.heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d_att)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), cfg.d_att, cfg.heads)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), cfg.d_att)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg.d_att, cfg.ff_dim)?,
        })
    }

    /// Returns the block output, self-attention transforms and cross-attention transforms.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        h: Var,
        dropout: f64,
    ) -> (Var, Vec<Var>, Vec<Var>) {
        let n = self.ln1.forward(g, store, x);
        let (a, self_ts) = self.self_attn.forward(g, store, n, n, true, dropout);
        let a = g.dropout(a, dropout);
        let x = g.add(x, a);
        let n = self.ln2.forward(g, store, x);
        let (c, cross_ts) = self.cross_attn.forward(g, store, n, h, false, dropout);
        let c = g.dropout(c, dropout);
        let x = g.add(x, c);
        let n = self.ln3.forward(g, store, x);
        let f = self.ff.forward(g, store, n, dropout);
        let f = g.dropout(f, dropout);
        (g.add(x, f), self_ts, cross_ts)
    }
}

/// Graph outputs of one decoder pass.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    /// `N_T x vocab` log-posteriors.
    pub logp: Var,
    /// Per block: causal self-attention transforms, one per head.
    pub self_transforms: Vec<Vec<Var>>,
    /// Per block: cross-attention transforms (`N_T x N_F/4`), one per head.
    pub cross_transforms: Vec<Vec<Var>>,
}

impl DecoderVars {
    /// The final block's cross-attention transforms.
    pub fn final_transforms(&self) -> &[Var] {
        self.cross_transforms.last().expect("decoder has at least one block")
    }
}

/// Autoregressive transformer decoder.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln_out: LayerNorm,
    pub out: Linear,
    pub vocab: usize,
    pub sos: usize,
    pub dropout: f64,
}

impl Decoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            embed: store.get_or_init(&format!("{name}.embed"), &[cfg.vocab, cfg.d_att], Init::Xavier)?,
            blocks: (0..cfg.decoder_blocks)
                .map(|b| DecoderBlock::new(store, &format!("{name}.block{b}"), cfg))
                .collect::<Result<_>>()?,
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), cfg.d_att)?,
            out: Linear::new(store, &format!("{name}.out"), cfg.d_att, cfg.vocab)?,
            vocab: cfg.vocab,
            sos: cfg.sos(),
            dropout: cfg.dropout,
        })
    }

    /// Row `t` predicts the token after `tokens[..=t]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, tokens: &[usize], h: Var) -> DecoderVars {
        let e = g.param(store, self.embed);
        let x = g.gather_rows(e, tokens);
        let mut x = add_positions(g, x);
        x = g.dropout(x, self.dropout);
        let mut self_transforms = Vec::with_capacity(self.blocks.len());
        let mut cross_transforms = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, s, c) = b.forward(g, store, x, h, self.dropout);
            x = next;
            self_transforms.push(s);
            cross_transforms.push(c);
        }
        let x = self.ln_out.forward(g, store, x);
        let y = self.out.forward(g, store, x);
        DecoderVars { logp: g.log_softmax(y), self_transforms, cross_transforms }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("decoder tokens"));
        }
        if tokens[0] != self.sos {
            return Err(Error::InvalidArgument(format!("decoder input must start with sos ({}), got {}", self.sos, tokens[0])));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::UnknownToken(bad));
        }
        Ok(())
    }
}

/// Token log-posteriors and the final block's per-head cross-attention transforms.
pub fn decoder_forward<S: Scalar>(
    tokens: &[usize],
    h: &Tensor<S>,
    dec: &Decoder,
    store: &ParamStore<S>,
) -> Result<(Tensor<S>, Vec<AttentionTransform<S>>)> {
    dec.check_tokens(tokens)?;
    if h.rows() == 0 {
        return Err(Error::Empty("decoder memory"));
    }
    let mut g = Graph::eval();
    let hv = g.input(h.clone());
    let out = dec.forward(&mut g, store, tokens, hv);
    let block = dec.blocks.len() - 1;
    let ts = out
        .final_transforms()
        .iter()
        .enumerate()
        .map(|(head, &t)| AttentionTransform { matrix: g.take_value(t), head, block })
        .collect();
    Ok((g.take_value(out.logp), ts))
}

/// Self-attention stack over `h` followed by a per-frame vocabulary readout.
#[derive(Clone, Debug)]
pub struct CtcDecoder {
    pub blocks: Vec<EncoderBlock>,
    pub ln_out: Option<LayerNorm>,
    pub out: Linear,
    pub blank: usize,
    pub dropout: f64,
}

impl CtcDecoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks: Vec<EncoderBlock> = (0..cfg.ctc_blocks)
            .map(|b| EncoderBlock::new(store, &format!("{name}.block{b}"), cfg))
            .collect::<Result<_>>()?;
        let ln_out = if blocks.is_empty() { None } else { Some(LayerNorm::new(store, &format!("{name}.ln_out"), cfg.d_att)?) };
        Ok(Self { blocks, ln_out, out: Linear::new(store, &format!("{name}.out"), cfg.d_att, cfg.vocab)?, blank: cfg.blank(), dropout: cfg.dropout })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, h: Var) -> (Var, Vec<Vec<Var>>) {
        let mut x = h;
        let mut all = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, ts) = b.forward(g, store, x, self.dropout);
            x = next;
            all.push(ts);
        }
        if let Some(ln) = &self.ln_out {
            x = ln.forward(g, store, x);
        }
        let y = self.out.forward(g, store, x);
        (g.log_softmax(y), all)
    }
}

pub fn ctc_decoder_forward<S: Scalar>(h: &Tensor<S>, dec: &CtcDecoder, store: &ParamStore<S>) -> Result<PosteriorGrid<S>> {
    if h.rows() == 0 {
        return Err(Error::Empty("ctc_decoder_forward"));
    }
    if h.cols() != dec.out.d_in {
        return Err(Error::shape("ctc_decoder_forward", format!("width {} vs {}", h.cols(), dec.out.d_in)));
    }
    let mut g = Graph::eval();
    let hv = g.input(h.clone());
    let (y, _) = dec.forward(&mut g, store, hv);
    PosteriorGrid::new(g.take_value(y), dec.blank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(r: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
    }

    fn tiny() -> ModelConfig {
        ModelConfig { d_att: 8, heads: 2, encoder_blocks: 1, decoder_blocks: 1, ctc_blocks: 1, ff_dim: 12, vocab: 5, dropout: 0.0 }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk(12).validate().is_ok());
        assert!(ModelConfig::full_scale(12).validate().is_ok());
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.encoder_blocks = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn transform_examples() {
        let q = rand_tensor(3, 4, 1);
        let k1 = rand_tensor(1, 4, 2);
        let wq = rand_tensor(4, 2, 3);
        let wk = rand_tensor(4, 2, 4);
        let t = attention_transform(&q, &k1, &wq, &wk).unwrap();
        assert!(t.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let k = rand_tensor(5, 4, 5);
        let z = Tensor::zeros(&[4, 2]);
        let t = attention_transform(&q, &k, &z, &z).unwrap();
        assert!(t.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let k = rand_tensor(4, 4, 6);
        let t = attention_transform(&q, &k, &wq, &wk).unwrap();
        // Explicit oracle.
        for i in 0..3 {
            let scores: Vec<f64> = (0..4)
                .map(|j| {
                    let mut s = 0.0;
                    for c in 0..2 {
                        let qa: f64 = (0..4).map(|m| q.at(i, m) * wq.at(m, c)).sum();
                        let ka: f64 = (0..4).map(|m| k.at(j, m) * wk.at(m, c)).sum();
                        s += qa * ka;
                    }
                    s / 2f64.sqrt()
                })
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..4 {
                assert!((t.at(i, j) - scores[j].exp() / z).abs() <= 1e-12);
            }
        }
        assert!(attention_transform(&q, &k, &rand_tensor(3, 2, 0), &wk).is_err());
    }

    #[test]
    fn apply_examples() {
        let v = rand_tensor(4, 6, 7);
        let wv = rand_tensor(6, 3, 8);
        let proj = v.matmul(&wv).unwrap();
        assert!(attention_apply(&Tensor::identity(4), &v, &wv).unwrap().max_abs_diff(&proj) < 1e-15);
        let uni = Tensor::filled(&[2, 4], 0.25);
        let out = attention_apply(&uni, &v, &wv).unwrap();
        for c in 0..3 {
            let mean = (0..4).map(|r| proj.at(r, c)).sum::<f64>() / 4.0;
            assert!((out.at(0, c) - mean).abs() < 1e-14 && (out.at(1, c) - mean).abs() < 1e-14);
        }
        let t = rand_tensor(3, 4, 9).map(f64::abs);
        let out = attention_apply(&t, &v, &wv).unwrap();
        for i in 0..3 {
            for c in 0..3 {
                let want: f64 = (0..4).map(|j| t.at(i, j) * (0..6).map(|m| v.at(j, m) * wv.at(m, c)).sum::<f64>()).sum();
                assert!((out.at(i, c) - want).abs() <= 1e-12);
            }
        }
        assert!(attention_apply(&Tensor::identity(3), &v, &wv).is_err());
    }

    #[test]
    fn multi_head_matches_per_head_functions() {
        for heads in [1, 2, 4] {
            let mut store = ParamStore::<f64>::new(3);
            let mha = MultiHeadAttention::new(&mut store, "m", 8, heads).unwrap();
            let xq = rand_tensor(3, 8, 1);
            let xk = rand_tensor(5, 8, 2);
            let mut g = Graph::eval();
            let (q, k) = (g.input(xq.clone()), g.input(xk.clone()));
            let (out, ts) = mha.forward(&mut g, &store, q, k, false, 0.0);
            assert_eq!(ts.len(), heads);
            let dk = 8 / heads;
            // Projections with bias folded in as an extra input column of ones.
            let aug = |x: &Tensor<f64>| {
                let ones = Tensor::filled(&[x.rows(), 1], 1.0);
                Tensor::concat_cols(&[x, &ones]).unwrap()
            };
            let wb = |l: &Linear, j: usize| {
                let w = store.value(l.w).slice_cols(j * dk, dk);
                let b = Tensor::row_vector(store.value(l.b).data()[j * dk..(j + 1) * dk].to_vec());
                Tensor::concat_rows(&[&w, &b]).unwrap()
            };
            let mut heads_out = Vec::new();
            for (j, &tv) in ts.iter().enumerate() {
                let t = attention_transform(&aug(&xq), &aug(&xk), &wb(&mha.wq, j), &wb(&mha.wk, j)).unwrap();
                assert!(g.value(tv).max_abs_diff(&t) <= 1e-12);
                heads_out.push(attention_apply(&t, &aug(&xk), &wb(&mha.wv, j)).unwrap());
            }
            let refs: Vec<&Tensor<f64>> = heads_out.iter().collect();
            let cat = Tensor::concat_cols(&refs).unwrap();
            let mut want = cat.matmul(store.value(mha.wo.w)).unwrap();
            for r in 0..want.rows() {
                for (v, b) in want.row_mut(r).iter_mut().zip(store.value(mha.wo.b).data()) {
                    *v += b;
                }
            }
            assert!(g.value(out).max_abs_diff(&want) <= 1e-12);
        }
    }

    #[test]
    fn causal_self_attention_ignores_future() {
        let mut store = ParamStore::<f64>::new(4);
        let mha = MultiHeadAttention::new(&mut store, "m", 8, 2).unwrap();
        let x = rand_tensor(5, 8, 3);
        let mut y = x.clone();
        for c in 0..8 {
            y.set(4, c, 9.0);
        }
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::eval();
            let v = g.input(x.clone());
            let (o, _) = mha.forward(&mut g, &store, v, v, true, 0.0);
            g.take_value(o)
        };
        let (a, b) = (run(&x), run(&y));
        assert_eq!(a.slice_rows(0, 4), b.slice_rows(0, 4));
        assert_ne!(a.row(4), b.row(4));
    }

    fn stream(n: usize, d: usize, seed: u64) -> FeatureStream<f64> {
        FeatureStream::new(rand_tensor(n, d, seed), 0.01, Modality::Audio).unwrap()
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let cfg = ModelConfig::desk(12);
        for d_in in [3, 23] {
            let mut store = ParamStore::<f64>::new(5);
            let enc = Encoder::new(&mut store, "encoder.audio", d_in, &cfg).unwrap();
            let s = stream(8, d_in, 1);
            let out = encoder_forward(&s, &enc, &store).unwrap();
            assert_eq!(out.h.shape(), &[2, 32]);
            let again = encoder_forward(&s, &enc, &store).unwrap();
            assert!(out.h.data().iter().zip(again.h.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(encoder_forward(&stream(3, d_in, 1), &enc, &store).is_err());
        }
    }

    #[test]
    fn every_transform_is_row_stochastic() {
        let cfg = ModelConfig { ctc_blocks: 2, ..ModelConfig::desk(12) };
        let mut store = ParamStore::<f64>::new(6);
        let enc = Encoder::new(&mut store, "e", 7, &cfg).unwrap();
        let dec = Decoder::new(&mut store, "d", &cfg).unwrap();
        let ctc = CtcDecoder::new(&mut store, "c", &cfg).unwrap();
        let mut g = Graph::eval();
        let x = g.input(rand_tensor(37, 7, 2).map(|v| 4.0 * v));
        let (h, enc_ts) = enc.forward(&mut g, &store, x);
        let out = dec.forward(&mut g, &store, &[11, 3, 4, 1, 2], h);
        let (logp, ctc_ts) = ctc.forward(&mut g, &store, h);
        let mut n = 0;
        for &t in enc_ts.iter().chain(&ctc_ts).chain(&out.self_transforms).chain(&out.cross_transforms).flatten() {
            let at = AttentionTransform { matrix: g.take_value(t), head: 0, block: 0 };
            assert!(at.stochastic_error() <= 1e-6);
            n += 1;
        }
        assert_eq!(n, 4 * (2 + 2 + 2 + 2));
        for v in [out.logp, logp] {
            let t = g.value(v);
            for r in 0..t.rows() {
                let lse = crate::scalar::log_sum_exp(t.row(r));
                assert!(lse.abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn decoder_contract() {
        let cfg = ModelConfig::desk(12);
        let mut store = ParamStore::<f64>::new(7);
        let dec = Decoder::new(&mut store, "decoder.s2s.a", &cfg).unwrap();
        let h = rand_tensor(6, 32, 3);
        let tokens = [11, 2, 5, 1, 7];
        let (logp, ts) = decoder_forward(&tokens, &h, &dec, &store).unwrap();
        assert_eq!(logp.shape(), &[5, 12]);
        assert_eq!(ts.len(), 4);
        for t in &ts {
            assert_eq!(t.matrix.shape(), &[5, 6]);
            assert_eq!(t.block, 1);
        }
        let mut changed = tokens;
        changed[3] = 9;
        let (logp2, ts2) = decoder_forward(&changed, &h, &dec, &store).unwrap();
        assert_eq!(logp.slice_rows(0, 3), logp2.slice_rows(0, 3));
        assert_ne!(logp.row(3), logp2.row(3));
        assert_eq!(ts[0].matrix.slice_rows(0, 3), ts2[0].matrix.slice_rows(0, 3));
        assert!(matches!(decoder_forward(&[], &h, &dec, &store), Err(Error::Empty(_))));
        assert!(decoder_forward(&[2, 3], &h, &dec, &store).is_err());
        assert!(matches!(decoder_forward(&[11, 12], &h, &dec, &store), Err(Error::UnknownToken(12))));
    }

    #[test]
    fn ctc_decoder_contract() {
        for ctc_blocks in [0, 2] {
            let cfg = ModelConfig { ctc_blocks, ..ModelConfig::desk(12) };
            let mut store = ParamStore::<f64>::new(8);
            let dec = CtcDecoder::new(&mut store, "decoder.ctc.a", &cfg).unwrap();
            let h = rand_tensor(9, 32, 4);
            let grid = ctc_decoder_forward(&h, &dec, &store).unwrap();
            assert_eq!((grid.frames(), grid.vocab()), (9, 12));
            let again = ctc_decoder_forward(&h, &dec, &store).unwrap();
            assert_eq!(grid.logp(), again.logp());
        }
    }

    #[test]
    fn reliability_encoder_contract() {
        let mut store = ParamStore::<f64>::new(9);
        let enc = ReliabilityEncoder::new(&mut store, "encoder.reliability.a", 9, 32).unwrap();
        let r = Tensor::filled(&[25, 9], 0.3);
        let xi = reliability_encoder_forward(&r, &enc, &store).unwrap();
        assert_eq!(xi.shape(), &[25, 32]);
        for i in 1..25 {
            assert_eq!(xi.row(i), xi.row(0));
        }
        let data = rand_tensor(40, 9, 1).map(|v| 5.0 + 3.0 * v);
        enc.set_stats(&mut store, &[&data]).unwrap();
        let z = enc.standardize(&store, &data);
        for c in 0..9 {
            let m = (0..40).map(|r| z.at(r, c)).sum::<f64>() / 40.0;
            let v = (0..40).map(|r| (z.at(r, c) - m).powi(2)).sum::<f64>() / 40.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
        assert!(!store.is_trainable(enc.norm.mean));
        assert!(reliability_encoder_forward(&Tensor::zeros(&[3, 7]), &enc, &store).is_err());
    }

    #[test]
    fn encoder_decoder_gradients() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new(10);
        let enc = Encoder::new(&mut store, "e", 3, &cfg).unwrap();
        let dec = Decoder::new(&mut store, "d", &cfg).unwrap();
        let ctc = CtcDecoder::new(&mut store, "c", &cfg).unwrap();
        let x = rand_tensor(9, 3, 11).map(|v| 3.0 * v);
        let report = check_gradients(&store, 1e-4, 6, |g, s| {
            let xv = g.input(x.clone());
            let (h, _) = enc.forward(g, s, xv);
            let out = dec.forward(g, s, &[4, 1, 2], h);
            let (lc, _) = ctc.forward(g, s, h);
            let a = g.pick_sum(out.logp, &[(0, 1), (1, 2), (2, 4)]);
            let b = crate::ctc::ctc_nll(g, lc, &[1], 0)?;
            let a = g.scale(a, -0.7);
            let b = g.scale(b, 0.3);
            Ok(g.add(a, b))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        assert!(report.checked > 100);
    }

    #[test]
    fn reliability_encoder_gradients() {
        let mut store = ParamStore::<f64>::new(12);
        let enc = ReliabilityEncoder::new(&mut store, "r", 4, 6).unwrap();
        let r = rand_tensor(5, 4, 2);
        let report = check_gradients(&store, 1e-4, 8, |g, s| {
            let y = enc.forward(g, s, &r);
            let y = g.tanh(y);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
