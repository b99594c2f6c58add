//! Character LSTM language model and joint CTC/attention beam search.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Var};
use crate::ctc::{ctc_loss_raw, CtcPrefixScorer, LabelSequence, PosteriorGrid};
use crate::error::{Error, Result};
use crate::functional::log_softmax;
use crate::nn::{lstm_step_values, Linear, Lstm};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformer::{decoder_forward, Decoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub layers: usize,
    pub units: usize,
    pub vocab: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self::desk(12)
    }
}

impl LmConfig {
    pub fn desk(vocab: usize) -> Self {
        Self { layers: 1, units: 64, vocab }
    }

    pub fn full_scale(vocab: usize) -> Self {
        Self { layers: 4, units: 2048, vocab }
    }

    pub fn sos(&self) -> usize {
        self.vocab - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.units == 0 {
            return Err(Error::Config("LM needs at least one layer and one unit".into()));
        }
        if self.vocab < 3 {
            return Err(Error::Config(format!("LM vocabulary {} too small", self.vocab)));
        }
        Ok(())
    }
}

/// Unidirectional LSTM stack reading the previous token and predicting the next.
#[derive(Clone, Debug)]
pub struct LstmLm {
    pub embed: ParamId,
    pub layers: Vec<Lstm>,
    pub out: Linear,
    pub vocab: usize,
    pub sos: usize,
}

/// Recurrent state after consuming a prefix, plus the next-token log-distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState<S> {
    h: Vec<Vec<S>>,
    c: Vec<Vec<S>>,
    logp: Vec<S>,
}

impl<S> LmState<S> {
    pub fn logp(&self) -> &[S] {
        &self.logp
    }
}

impl LstmLm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &LmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(Lstm::new(store, &format!("{name}.lstm{l}"), cfg.units, cfg.units)?);
        }
        Ok(Self {
            embed: store.get_or_init(&format!("{name}.embed"), &[cfg.vocab, cfg.units], Init::Xavier)?,
            layers,
            out: Linear::new(store, &format!("{name}.out"), cfg.units, cfg.vocab)?,
            vocab: cfg.vocab,
            sos: cfg.sos(),
        })
    }

    fn check(&self, tokens: &[usize]) -> Result<()> {
        if tokens.first() != Some(&self.sos) {
            return Err(Error::InvalidArgument(format!("LM input must start with sos ({})", self.sos)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::UnknownToken(bad));
        }
        Ok(())
    }

    /// Row `t` is the log-distribution of the token after `tokens[..=t]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, tokens: &[usize]) -> Var {
        let e = g.param(store, self.embed);
        let mut x = g.gather_rows(e, tokens);
        for l in &self.layers {
            x = l.forward_seq(g, store, x, false);
        }
        let y = self.out.forward(g, store, x);
        g.log_softmax(y)
    }

    /// State after reading sos.
    pub fn start<S: Scalar>(&self, store: &ParamStore<S>) -> LmState<S> {
        let zeros = |l: &Lstm| vec![S::zero(); l.cells];
        let init = LmState { h: self.layers.iter().map(zeros).collect(), c: self.layers.iter().map(zeros).collect(), logp: Vec::new() };
        self.step(store, &init, self.sos)
    }

    pub fn advance<S: Scalar>(&self, store: &ParamStore<S>, state: &LmState<S>, token: usize) -> Result<LmState<S>> {
        if token >= self.vocab {
            return Err(Error::UnknownToken(token));
        }
        Ok(self.step(store, state, token))
    }

    fn step<S: Scalar>(&self, store: &ParamStore<S>, state: &LmState<S>, token: usize) -> LmState<S> {
        let mut x = store.value(self.embed).row(token).to_vec();
        let mut h = Vec::with_capacity(self.layers.len());
        let mut c = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (hn, cn) = lstm_step_values(layer, store, &x, &state.h[l], &state.c[l]);
            x = hn.clone();
            h.push(hn);
            c.push(cn);
        }
        let w = store.value(self.out.w);
        let mut logits = store.value(self.out.b).data().to_vec();
        for (k, &xv) in x.iter().enumerate() {
            for (o, &wv) in logits.iter_mut().zip(w.row(k)) {
                *o += xv * wv;
            }
        }
        let logp = log_softmax(&logits).expect("non-empty vocabulary");
        LmState { h, c, logp }
    }
}

/// Next-token log-distribution after `prefix` (starting with sos), computed from scratch.
pub fn lm_score<S: Scalar>(prefix: &[usize], lm: &LstmLm, store: &ParamStore<S>) -> Result<Vec<S>> {
    lm.check(prefix)?;
    let mut g = Graph::eval();
    let y = lm.forward(&mut g, store, prefix);
    Ok(g.value(y).row(prefix.len() - 1).to_vec())
}

/// Token-level posterior source for the search.
pub trait S2sScorer<S> {
    /// Log-distribution over the token following `prefix` (which starts with sos).
    fn next_logp(&mut self, prefix: &[usize]) -> Result<Vec<S>>;
}

impl<S, F: FnMut(&[usize]) -> Result<Vec<S>>> S2sScorer<S> for F {
    fn next_logp(&mut self, prefix: &[usize]) -> Result<Vec<S>> {
        self(prefix)
    }
}

/// Single attention decoder over a fixed encoder output.
pub struct DecoderScorer<'a, S> {
    pub decoder: &'a Decoder,
    pub store: &'a ParamStore<S>,
    pub memory: &'a Tensor<S>,
}

impl<S: Scalar> S2sScorer<S> for DecoderScorer<'_, S> {
    fn next_logp(&mut self, prefix: &[usize]) -> Result<Vec<S>> {
        let (logp, _) = decoder_forward(prefix, self.memory, self.decoder, self.store)?;
        Ok(logp.row(logp.rows() - 1).to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub alpha: f64,
    pub theta: f64,
    pub beam: usize,
    /// Added once per emitted token, end token included.
    pub length_penalty: f64,
    /// Output labels cap; `None` uses the CTC frame count.
    pub max_len: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { alpha: 0.3, theta: 0.5, beam: 10, length_penalty: 0.0, max_len: None }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::Config(format!("theta {} must be finite and >= 0", self.theta)));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::Config("length_penalty must be finite".into()));
        }
        Ok(())
    }

    /// Combined score of the components; zero weights drop their term, so
    /// an impossible CTC path does not poison `alpha = 0`.
    pub fn combine<S: Scalar>(&self, ctc: S, s2s: S, lm: S, emitted: usize) -> S {
        let term = |w: f64, x: S| if w == 0.0 { S::zero() } else { S::lit(w) * x };
        term(self.alpha, ctc) + term(1.0 - self.alpha, s2s) + term(self.theta, lm) + S::lit(self.length_penalty) * S::from_usize_lossy(emitted)
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// Output labels, without sos or eos.
    pub labels: Vec<usize>,
    pub ended: bool,
    pub ctc_logp: S,
    pub s2s_logp: S,
    pub lm_logp: S,
    pub score: S,
    lm_state: Option<LmState<S>>,
}

impl<S: Scalar> Hypothesis<S> {
    /// Tokens emitted so far, eos included once ended.
    pub fn emitted(&self) -> usize {
        self.labels.len() + usize::from(self.ended)
    }
}

/// Higher score first; ties go to the lexicographically smaller label sequence.
fn rank<S: Scalar>(a: &Hypothesis<S>, b: &Hypothesis<S>) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.labels.cmp(&b.labels)).then_with(|| a.ended.cmp(&b.ended))
}

#[derive(Clone, Debug)]
pub struct DecodeResult<S> {
    pub labels: LabelSequence,
    pub score: S,
    pub best: Hypothesis<S>,
}

/// Label-synchronous joint search over a CTC grid, a token scorer and an
/// optional LM. The end token is `grid.vocab() - 1`.
pub fn joint_beam_search<S: Scalar>(
    grid: &PosteriorGrid<S>,
    s2s: &mut dyn S2sScorer<S>,
    lm: Option<(&LstmLm, &ParamStore<S>)>,
    cfg: &BeamConfig,
) -> Result<DecodeResult<S>> {
    cfg.validate()?;
    let vocab = grid.vocab();
    let eos = vocab - 1;
    let blank = grid.blank();
    if let Some((l, _)) = lm {
        if l.vocab != vocab {
            return Err(Error::shape("joint_beam_search", format!("LM vocabulary {} vs grid {vocab}", l.vocab)));
        }
    }
    let max_len = cfg.max_len.unwrap_or(grid.frames());
    let mut ctc = CtcPrefixScorer::new(grid, eos);
    let use_lm = cfg.theta != 0.0;
    let root = Hypothesis {
        labels: Vec::new(),
        ended: false,
        ctc_logp: S::zero(),
        s2s_logp: S::zero(),
        lm_logp: S::zero(),
        score: S::zero(),
        lm_state: match lm {
            Some((l, st)) if use_lm => Some(l.start(st)),
            _ => None,
        },
    };
    let mut live = vec![root];
    let mut ended: Vec<Hypothesis<S>> = Vec::new();
    for step in 0..=max_len {
        let mut cands = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            let mut prefix = Vec::with_capacity(hyp.labels.len() + 1);
            prefix.push(eos);
            prefix.extend_from_slice(&hyp.labels);
            let s2s_row = if cfg.alpha < 1.0 { Some(s2s.next_logp(&prefix)?) } else { None };
            if let Some(row) = &s2s_row {
                if row.len() != vocab {
                    return Err(Error::shape("joint_beam_search", format!("scorer row of {} vs vocabulary {vocab}", row.len())));
                }
            }
            for token in 0..vocab {
                if token == blank || (step == max_len && token != eos) {
                    continue;
                }
                let s2s_inc = s2s_row.as_ref().map_or(S::zero(), |r| r[token]);
                let lm_inc = hyp.lm_state.as_ref().map_or(S::zero(), |st| st.logp()[token]);
                let mut next = Hypothesis {
                    labels: hyp.labels.clone(),
                    ended: token == eos,
                    ctc_logp: S::zero(),
                    s2s_logp: hyp.s2s_logp + s2s_inc,
                    lm_logp: hyp.lm_logp + lm_inc,
                    score: S::zero(),
                    lm_state: None,
                };
                if token != eos {
                    next.labels.push(token);
                }
                // Absolute prefix scores rather than increments: an infeasible
                // prefix stays at -inf instead of producing -inf - -inf.
                if cfg.alpha > 0.0 {
                    ctc.score(&hyp.labels, token)?;
                    next.ctc_logp = if token == eos { ctc.full_score(&hyp.labels)? } else { ctc.prefix_score(&next.labels)? };
                }
                next.score = cfg.combine(next.ctc_logp, next.s2s_logp, next.lm_logp, next.emitted());
                cands.push((next, token, parent));
            }
        }
        cands.sort_by(|a, b| rank(&a.0, &b.0));
        cands.truncate(cfg.beam);
        let mut next_live = Vec::new();
        for (mut next, token, parent) in cands {
            if next.ended {
                ended.push(next);
            } else {
                if let (Some((l, st)), Some(state)) = (lm, live[parent].lm_state.as_ref()) {
                    next.lm_state = Some(l.advance(st, state, token)?);
                }
                next_live.push(next);
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        // Every increment is a log-probability, so with no length bonus a live
        // hypothesis can never overtake the best ended one.
        if cfg.length_penalty <= 0.0 {
            let best_end = ended.iter().map(|h| h.score).fold(S::neg_infinity(), S::max);
            if live.iter().all(|h| h.score < best_end) {
                break;
            }
        }
    }
    ended.sort_by(rank);
    let best = ended.into_iter().next().ok_or_else(|| Error::InvalidArgument("search produced no complete hypothesis".into()))?;
    Ok(DecodeResult { labels: LabelSequence::new(best.labels.clone()), score: best.score, best })
}

/// Score components of a complete label sequence recomputed from scratch:
/// `(ctc, s2s, lm)` log-probabilities, eos included.
pub fn rescore_components<S: Scalar>(
    grid: &PosteriorGrid<S>,
    s2s: &mut dyn S2sScorer<S>,
    lm: Option<(&LstmLm, &ParamStore<S>)>,
    labels: &[usize],
) -> Result<(S, S, S)> {
    let eos = grid.vocab() - 1;
    let ctc = -ctc_loss_raw(grid.logp(), labels, grid.blank())?.value();
    let mut prefix = vec![eos];
    let (mut s2s_sum, mut lm_sum) = (S::zero(), S::zero());
    for &t in labels.iter().chain(std::iter::once(&eos)) {
        s2s_sum += s2s.next_logp(&prefix)?[t];
        if let Some((l, st)) = lm {
            lm_sum += lm_score(&prefix, l, st)?[t];
        }
        prefix.push(t);
    }
    Ok((ctc, s2s_sum, lm_sum))
}
