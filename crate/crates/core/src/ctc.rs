//! Connectionist temporal classification: loss, best-path readout and
//! label-synchronous prefix scoring.
//!
//! All recursions run in the log domain using [`log_add`]; there is no
//! probability-domain fallback.

use std::collections::HashMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{log_add, log_sum_exp, Scalar};
use crate::tensor::Tensor;

/// Frame-level log-posteriors `T x |vocab|` with a designated blank.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrid<S> {
    logp: Tensor<S>,
    blank: usize,
}

impl<S: Scalar> PosteriorGrid<S> {
    /// Validates shape and that every row is a log-distribution within `1e-6`.
    pub fn new(logp: Tensor<S>, blank: usize) -> Result<Self> {
        if logp.shape().len() != 2 || logp.rows() == 0 {
            return Err(Error::shape("PosteriorGrid", format!("expected non-empty T x V, got {:?}", logp.shape())));
        }
        if blank >= logp.cols() {
            return Err(Error::InvalidArgument(format!("blank {blank} outside vocabulary of {}", logp.cols())));
        }
        for t in 0..logp.rows() {
            let lse = log_sum_exp(logp.row(t));
            if !(lse.abs().as_f64() <= 1e-6) {
                return Err(Error::InvalidArgument(format!("row {t} is not log-normalised (logsumexp {lse})")));
            }
        }
        Ok(Self { logp, blank })
    }

    pub fn frames(&self) -> usize {
        self.logp.rows()
    }

    pub fn vocab(&self) -> usize {
        self.logp.cols()
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn logp(&self) -> &Tensor<S> {
        &self.logp
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.logp
    }
}

/// Non-blank token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }
}

/// Outcome of [`ctc_loss`]. A label sequence that cannot be aligned to the
/// available frames is reported instead of being masked.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CtcLoss<S> {
    Finite(S),
    Infeasible { frames: usize, required: usize },
}

impl<S: Scalar> CtcLoss<S> {
    /// Negative log-likelihood, `+inf` when infeasible.
    pub fn value(&self) -> S {
        match *self {
            CtcLoss::Finite(v) => v,
            CtcLoss::Infeasible { .. } => S::infinity(),
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, CtcLoss::Finite(_))
    }
}

/// Minimum frame count for `labels`: one per label plus one blank between repeats.
pub fn required_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_labels<S: Scalar>(logp: &Tensor<S>, labels: &[usize], blank: usize) -> Result<()> {
    let v = logp.cols();
    for &l in labels {
        if l >= v || l == blank {
            return Err(Error::InvalidArgument(format!("label {l} is blank or outside vocabulary of {v}")));
        }
    }
    Ok(())
}

/// Extended label sequence with blanks: `b l1 b l2 ... lU b`.
fn extend(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Forward variables `alpha[t][s]` (log domain, emission at `t` included).
fn forward_vars<S: Scalar>(logp: &Tensor<S>, ext: &[usize]) -> Vec<Vec<S>> {
    let (t_len, n) = (logp.rows(), ext.len());
    let ninf = S::neg_infinity();
    let mut alpha = vec![vec![ninf; n]; t_len];
    alpha[0][0] = logp.at(0, ext[0]);
    if n > 1 {
        alpha[0][1] = logp.at(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..n {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != ext[s - 2] {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if a == ninf { ninf } else { a + logp.at(t, ext[s]) };
        }
    }
    alpha
}

/// Backward variables `beta[t][s]` (log domain, emission at `t` excluded).
fn backward_vars<S: Scalar>(logp: &Tensor<S>, ext: &[usize]) -> Vec<Vec<S>> {
    let (t_len, n) = (logp.rows(), ext.len());
    let ninf = S::neg_infinity();
    let mut beta = vec![vec![ninf; n]; t_len];
    beta[t_len - 1][n - 1] = S::zero();
    if n > 1 {
        beta[t_len - 1][n - 2] = S::zero();
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..n {
            let mut b = beta[t + 1][s] + logp.at(t + 1, ext[s]);
            if s + 1 < n {
                b = log_add(b, beta[t + 1][s + 1] + logp.at(t + 1, ext[s + 1]));
            }
            if s + 2 < n && ext[s] != ext[s + 2] {
                b = log_add(b, beta[t + 1][s + 2] + logp.at(t + 1, ext[s + 2]));
            }
            beta[t][s] = b;
        }
    }
    beta
}

fn total_log_prob<S: Scalar>(alpha: &[Vec<S>]) -> S {
    let last = alpha.last().expect("T >= 1");
    let n = last.len();
    if n == 1 {
        last[0]
    } else {
        log_add(last[n - 1], last[n - 2])
    }
}

/// `-log p(labels | grid)` summed over all CTC alignments.
pub fn ctc_loss<S: Scalar>(grid: &PosteriorGrid<S>, labels: &LabelSequence) -> Result<CtcLoss<S>> {
    ctc_loss_raw(grid.logp(), labels.ids(), grid.blank())
}

/// As [`ctc_loss`] on an unvalidated `T x V` log-posterior matrix.
pub fn ctc_loss_raw<S: Scalar>(logp: &Tensor<S>, labels: &[usize], blank: usize) -> Result<CtcLoss<S>> {
    check_labels(logp, labels, blank)?;
    let required = required_frames(labels);
    if logp.rows() < required.max(1) {
        return Ok(CtcLoss::Infeasible { frames: logp.rows(), required });
    }
    let ext = extend(labels, blank);
    let alpha = forward_vars(logp, &ext);
    Ok(CtcLoss::Finite(-total_log_prob(&alpha)))
}

/// Loss together with its gradient with respect to every entry of `logp`
/// (treating the entries as free log-emission scores).
pub fn ctc_loss_and_grad<S: Scalar>(logp: &Tensor<S>, labels: &[usize], blank: usize) -> Result<(CtcLoss<S>, Tensor<S>)> {
    check_labels(logp, labels, blank)?;
    let required = required_frames(labels);
    if logp.rows() < required.max(1) {
        return Ok((CtcLoss::Infeasible { frames: logp.rows(), required }, Tensor::zeros(logp.shape())));
    }
    let ext = extend(labels, blank);
    let alpha = forward_vars(logp, &ext);
    let beta = backward_vars(logp, &ext);
    let log_p = total_log_prob(&alpha);
    let mut grad = Tensor::zeros(logp.shape());
    for t in 0..logp.rows() {
        for (s, &k) in ext.iter().enumerate() {
            let occ = alpha[t][s] + beta[t][s] - log_p;
            if occ > S::neg_infinity() {
                let cur = grad.at(t, k);
                grad.set(t, k, cur - occ.exp());
            }
        }
    }
    Ok((CtcLoss::Finite(-log_p), grad))
}

/// Differentiable CTC negative log-likelihood of the `T x V` node `logp`.
pub fn ctc_nll<S: Scalar>(g: &mut Graph<S>, logp: Var, labels: &[usize], blank: usize) -> Result<Var> {
    let (loss, grad) = ctc_loss_and_grad(g.value(logp), labels, blank)?;
    match loss {
        CtcLoss::Finite(v) => Ok(g.scalar_fn(logp, v, grad)),
        CtcLoss::Infeasible { frames, required } => Err(Error::Length(format!(
            "CTC alignment infeasible: {required} frames required, {frames} available"
        ))),
    }
}

/// Best path: per-frame argmax, merge repeats, drop blanks.
/// Ties go to the lower token id.
pub fn ctc_greedy_decode<S: Scalar>(grid: &PosteriorGrid<S>) -> LabelSequence {
    let logp = grid.logp();
    let path: Vec<usize> = (0..logp.rows())
        .map(|t| {
            let row = logp.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path, grid.blank())
}

/// The CTC many-to-one map.
pub fn collapse(path: &[usize], blank: usize) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    LabelSequence(out)
}

#[derive(Clone, Debug)]
struct PrefixState<S> {
    /// log prob of the prefix with the last emitted frame being a label, per frame.
    r_label: Vec<S>,
    /// log prob of the prefix with the last frame being blank, per frame.
    r_blank: Vec<S>,
    /// log prefix probability (over all continuations).
    score: S,
}

/// Per-decode-session CTC prefix scorer over one grid.
///
/// `score(prefix, c)` requires `prefix` to have been produced by an earlier
/// call (the empty prefix is always known). Scoring the end token returns the
/// increment to the full-sequence probability of `prefix`.
pub struct CtcPrefixScorer<'g, S> {
    grid: &'g PosteriorGrid<S>,
    eos: usize,
    cache: HashMap<Vec<usize>, PrefixState<S>>,
}

impl<'g, S: Scalar> CtcPrefixScorer<'g, S> {
    pub fn new(grid: &'g PosteriorGrid<S>, eos: usize) -> Self {
        let logp = grid.logp();
        let mut r_blank = Vec::with_capacity(grid.frames());
        let mut acc = S::zero();
        for t in 0..grid.frames() {
            acc += logp.at(t, grid.blank());
            r_blank.push(acc);
        }
        let empty = PrefixState { r_label: vec![S::neg_infinity(); grid.frames()], r_blank, score: S::zero() };
        let mut cache = HashMap::new();
        cache.insert(Vec::new(), empty);
        Self { grid, eos, cache }
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    /// Log prefix probability of an already scored prefix.
    pub fn prefix_score(&self, prefix: &[usize]) -> Result<S> {
        self.cache.get(prefix).map(|s| s.score).ok_or(Error::PrefixCacheMiss)
    }

    /// Full-sequence log probability `log p(prefix | grid)`.
    pub fn full_score(&self, prefix: &[usize]) -> Result<S> {
        let st = self.cache.get(prefix).ok_or(Error::PrefixCacheMiss)?;
        let t = self.grid.frames() - 1;
        Ok(log_add(st.r_label[t], st.r_blank[t]))
    }

    /// Incremental log-score of extending `prefix` by `token`.
    pub fn score(&mut self, prefix: &[usize], token: usize) -> Result<S> {
        let prev = self.cache.get(prefix).ok_or(Error::PrefixCacheMiss)?;
        if token == self.eos {
            return Ok(self.full_score(prefix)? - prev.score);
        }
        if token == self.grid.blank() || token >= self.grid.vocab() {
            return Err(Error::UnknownToken(token));
        }
        let mut key = prefix.to_vec();
        key.push(token);
        if let Some(st) = self.cache.get(&key) {
            return Ok(st.score - prev.score);
        }
        let prev = prev.clone();
        let st = self.extend_state(&prev, prefix.last().copied(), token);
        let inc = st.score - prev.score;
        self.cache.insert(key, st);
        Ok(inc)
    }

    fn extend_state(&self, prev: &PrefixState<S>, last: Option<usize>, c: usize) -> PrefixState<S> {
        let logp = self.grid.logp();
        let blank = self.grid.blank();
        let t_len = self.grid.frames();
        let ninf = S::neg_infinity();
        let mut r_label = vec![ninf; t_len];
        let mut r_blank = vec![ninf; t_len];
        if last.is_none() {
            r_label[0] = logp.at(0, c);
        }
        let mut score = r_label[0];
        for t in 1..t_len {
            let phi = if last == Some(c) { prev.r_blank[t - 1] } else { log_add(prev.r_blank[t - 1], prev.r_label[t - 1]) };
            let emit = logp.at(t, c);
            r_label[t] = log_add(r_label[t - 1], phi) + emit;
            r_blank[t] = log_add(r_blank[t - 1], r_label[t - 1]) + logp.at(t, blank);
            score = log_add(score, phi + emit);
        }
        PrefixState { r_label, r_blank, score }
    }
}
