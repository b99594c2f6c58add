//! Synthetic two-stream corpus.
//!
//! Audio is rendered as an 8 kHz waveform: each letter is a harmonic complex
//! at the speaker's f0 whose harmonics are weighted by two letter-specific
//! formants. Spaces and utterance edges are near-silent. Noise is mixed at
//! waveform level. Video frames at 25 fps come from viseme prototypes that are
//! shared by letter pairs, so lip reading is harder than listening.
//!
//! Script (text, timing, speaker) and noise are drawn from separate seeded
//! generators, so one utterance can be re-rendered under any condition.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::text::{self, FIRST_LETTER, LETTERS, SPACE};
use crate::error::{Error, Result};
use crate::reliability::{
    extract_audio_reliability, frame_len, frame_shift_samples, load_visual_reliability, video_columns, write_visual_reliability,
    MfccExtractor, ReliabilityStream, DEFAULT_MFCC_COUNT,
};
use crate::streams::{apply_reverb, mix_noise_at_snr, visual_corrupt, FeatureFile, FeatureStream, Modality, VisualCorruption, CLEAN_SNR};
use crate::tensor::Tensor;

pub const VIDEO_DIM: usize = 16;
pub const VIDEO_SHIFT: f64 = 0.04;
/// Audio frames per video frame.
pub const VIDEO_RATIO: usize = 4;
/// Visemes: one per letter pair, plus the closed mouth.
pub const VISEMES: usize = LETTERS.len().div_ceil(2) + 1;
const SILENCE_VISEME: usize = VISEMES - 1;
const F1: [f64; 3] = [300.0, 520.0, 740.0];
const F2: [f64; 3] = [950.0, 1550.0, 2150.0];
const FORMANT_BW: f64 = 130.0;
const SILENCE_STD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub lexicon: usize,
    /// Inclusive letter-count range of lexicon words.
    pub word_len: [usize; 2],
    /// Inclusive word-count range of utterances.
    pub words: [usize; 2],
    pub sample_rate: usize,
    /// SNRs drawn for noisy training utterances.
    pub train_snrs: Vec<f64>,
    pub train_clean_fraction: f64,
    pub train_music_fraction: f64,
    pub train_visual_fraction: f64,
    pub video_jitter: f64,
    /// Scale of the per-letter offset that separates the two letters of a viseme.
    pub video_pair_offset: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            train: 1000,
            dev: 60,
            test: 100,
            lexicon: 120,
            word_len: [2, 4],
            words: [1, 3],
            sample_rate: 8000,
            train_snrs: (-3..=3).map(|k| 3.0 * k as f64).collect(),
            train_clean_fraction: 0.2,
            train_music_fraction: 0.5,
            train_visual_fraction: 0.3,
            video_jitter: 1.2,
            video_pair_offset: 0.15,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.word_len[0] == 0 || self.word_len[0] > self.word_len[1] {
            return bad(format!("invalid word length range {:?}", self.word_len));
        }
        if self.words[0] == 0 || self.words[0] > self.words[1] {
            return bad(format!("invalid words-per-utterance range {:?}", self.words));
        }
        if self.train == 0 || self.test == 0 {
            return bad("train and test splits must be non-empty".into());
        }
        let possible: f64 = (self.word_len[0]..=self.word_len[1]).map(|n| (LETTERS.len() as f64).powi(n as i32)).sum();
        if self.lexicon == 0 || self.lexicon as f64 > possible {
            return bad(format!("lexicon size {} not in 1..={possible}", self.lexicon));
        }
        if self.sample_rate < 4000 {
            return bad(format!("sample rate {} below 4 kHz", self.sample_rate));
        }
        if self.train_snrs.is_empty() || self.train_snrs.iter().any(|s| s.is_nan()) {
            return bad("train_snrs must be a non-empty list of numbers".into());
        }
        for (name, f) in [
            ("train_clean_fraction", self.train_clean_fraction),
            ("train_music_fraction", self.train_music_fraction),
            ("train_visual_fraction", self.train_visual_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} {f} outside [0, 1]"));
            }
        }
        if !(self.video_jitter >= 0.0 && self.video_pair_offset >= 0.0) {
            return bad("video jitter and pair offset must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NoiseKind {
    #[serde(rename = "a")]
    Ambient,
    #[serde(rename = "m")]
    Music,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Ambient => "a",
            NoiseKind::Music => "m",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(NoiseKind::Ambient),
            "m" => Ok(NoiseKind::Music),
            other => Err(Error::InvalidArgument(format!("unknown noise kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisualCondition {
    pub kind: VisualCorruption,
    pub strength: f64,
}

/// Corruption applied when rendering an utterance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Condition {
    pub noise: NoiseKind,
    /// [`CLEAN_SNR`] for no added noise.
    pub snr_db: f64,
    pub visual: Option<VisualCondition>,
    pub reverb: bool,
}

impl Condition {
    pub fn clean() -> Self {
        Self { noise: NoiseKind::Ambient, snr_db: CLEAN_SNR, visual: None, reverb: false }
    }

    pub fn audio(noise: NoiseKind, snr_db: f64) -> Self {
        Self { noise, snr_db, ..Self::clean() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

/// Ground-truth frame span of one token; `token` is `None` at utterance edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub token: Option<usize>,
    pub start: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub labels: Vec<usize>,
    pub segments: Vec<Segment>,
    pub audio: FeatureStream<f64>,
    pub video: FeatureStream<f64>,
    pub audio_rel: ReliabilityStream<f64>,
    pub video_rel: ReliabilityStream<f64>,
    pub condition: Condition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Utterance] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Tables shared by every utterance of a corpus.
#[derive(Clone, Debug)]
pub struct Prototypes {
    pub lexicon: Vec<String>,
    /// `VISEMES x VIDEO_DIM`.
    pub visemes: Vec<Vec<f64>>,
    /// Per-letter video offset, `letters x VIDEO_DIM`.
    pub letter_offsets: Vec<Vec<f64>>,
    /// Mean action-unit intensities per viseme.
    pub action_units: Vec<Vec<f64>>,
}

impl Prototypes {
    pub fn new(cfg: &CorpusConfig) -> Self {
        let mut rng = rng_for(&[cfg.seed, 0xA11]);
        let letters: Vec<char> = LETTERS.chars().collect();
        let mut lexicon: Vec<String> = Vec::with_capacity(cfg.lexicon);
        while lexicon.len() < cfg.lexicon {
            let n = rng.gen_range(cfg.word_len[0]..=cfg.word_len[1]);
            let w: String = (0..n).map(|_| letters[rng.gen_range(0..letters.len())]).collect();
            if !lexicon.contains(&w) {
                lexicon.push(w);
            }
        }
        let table = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..cols).map(|_| gauss(rng)).collect()).collect()
        };
        let visemes = table(VISEMES, VIDEO_DIM, &mut rng);
        let letter_offsets = table(LETTERS.len(), VIDEO_DIM, &mut rng);
        let action_units = (0..VISEMES).map(|_| (0..VIDEO_COLUMNS_AU).map(|_| rng.gen_range(0.0..3.0)).collect()).collect();
        Self { lexicon, visemes, letter_offsets, action_units }
    }
}

const VIDEO_COLUMNS_AU: usize = 6;

pub fn viseme_of(token: Option<usize>) -> usize {
    match token {
        Some(t) if t >= FIRST_LETTER => (t - FIRST_LETTER) / 2,
        _ => SILENCE_VISEME,
    }
}

struct Script {
    text: String,
    labels: Vec<usize>,
    segments: Vec<Segment>,
    frames: usize,
    f0: f64,
    formant_scale: f64,
    gains: Vec<f64>,
}

fn draw_script(cfg: &CorpusConfig, protos: &Prototypes, split: Split, index: usize) -> Result<Script> {
    let mut rng = rng_for(&[cfg.seed, split.tag(), index as u64, 1]);
    let n_words = rng.gen_range(cfg.words[0]..=cfg.words[1]);
    let words: Vec<&str> = (0..n_words).map(|_| protos.lexicon[rng.gen_range(0..protos.lexicon.len())].as_str()).collect();
    let text = words.join(" ");
    let labels = text::encode(&text)?;
    let mut segments = Vec::with_capacity(labels.len() + 2);
    let mut t = 0;
    let mut push = |token: Option<usize>, frames: usize, t: &mut usize| {
        segments.push(Segment { token, start: *t, frames });
        *t += frames;
    };
    push(None, rng.gen_range(6..=10), &mut t);
    for &l in &labels {
        let n = if l == SPACE { rng.gen_range(5..=8) } else { rng.gen_range(8..=12) };
        push(Some(l), n, &mut t);
    }
    push(None, rng.gen_range(6..=10), &mut t);
    let gains = labels.iter().map(|_| rng.gen_range(0.8..1.25)).collect();
    Ok(Script { text, labels, segments, frames: t, f0: rng.gen_range(100.0..220.0), formant_scale: rng.gen_range(0.94..1.06), gains })
}

fn letter_formants(token: usize) -> (f64, f64) {
    let k = token - FIRST_LETTER;
    (F1[k % 3], F2[k / 3])
}

fn render_clean(cfg: &CorpusConfig, script: &Script, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    let (flen, shift) = (frame_len(cfg.sample_rate), frame_shift_samples(cfg.sample_rate));
    let n = (script.frames - 1) * shift + flen;
    let mut x: Vec<f64> = (0..n).map(|_| SILENCE_STD * gauss(rng)).collect();
    let lead = (flen - shift) / 2;
    // f0 drifts slowly over the utterance.
    let drift_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut phase = 0.0f64;
    let mut phases = Vec::with_capacity(n);
    for i in 0..n {
        let f0 = script.f0 * (1.0 + 0.03 * (std::f64::consts::TAU * 1.5 * i as f64 / sr + drift_phase).sin());
        phase += std::f64::consts::TAU * f0 / sr;
        phases.push((phase, f0));
    }
    let mut gain_idx = 0;
    for seg in &script.segments {
        let Some(tok) = seg.token.filter(|&t| t != SPACE) else {
            if seg.token == Some(SPACE) {
                gain_idx += 1;
            }
            continue;
        };
        let gain = script.gains[gain_idx];
        gain_idx += 1;
        let (f1, f2) = letter_formants(tok);
        let (f1, f2) = (f1 * script.formant_scale, f2 * script.formant_scale);
        let start = seg.start * shift + lead;
        let end = ((seg.start + seg.frames) * shift + lead).min(n);
        let len = end - start;
        let ramp = shift.min(len / 2).max(1);
        let mut buf = vec![0.0; len];
        for (k, b) in buf.iter_mut().enumerate() {
            let (ph, f0) = phases[start + k];
            let mut v = 0.0;
            let mut h = 1;
            while h as f64 * f0 < 0.475 * sr {
                let fh = h as f64 * f0;
                let a = (-(fh - f1).powi(2) / (2.0 * FORMANT_BW * FORMANT_BW)).exp()
                    + 0.8 * (-(fh - f2).powi(2) / (2.0 * FORMANT_BW * FORMANT_BW)).exp()
                    + 0.01;
                v += a * (h as f64 * ph).sin();
                h += 1;
            }
            let env = if k < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * k as f64 / ramp as f64).cos()
            } else if k >= len - ramp {
                0.5 - 0.5 * (std::f64::consts::PI * (len - 1 - k) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            *b = v * env;
        }
        let rms = (buf.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt().max(1e-12);
        for (k, b) in buf.iter().enumerate() {
            x[start + k] += 0.1 * gain * b / rms;
        }
    }
    x
}

fn render_noise(kind: NoiseKind, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        NoiseKind::Ambient => {
            let mut y = 0.0;
            (0..n)
                .map(|_| {
                    y = 0.95 * y + gauss(rng);
                    y + 0.3 * gauss(rng)
                })
                .collect()
        }
        NoiseKind::Music => {
            let mut out = vec![0.0; n];
            for _voice in 0..2 {
                let mut pos = 0usize;
                while pos < n {
                    let dur = ((rng.gen_range(0.1..0.3)) * sr) as usize;
                    let f = rng.gen_range(150.0..600.0);
                    let amp = rng.gen_range(0.5..1.0);
                    let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    for k in 0..dur.min(n - pos) {
                        let t = k as f64 / sr;
                        let env = (-3.0 * k as f64 / dur as f64).exp();
                        let mut v = 0.0;
                        for h in 1..=5 {
                            if h as f64 * f < 0.475 * sr {
                                v += (std::f64::consts::TAU * h as f64 * f * t + ph).sin() / h as f64;
                            }
                        }
                        out[pos + k] += amp * env * v;
                    }
                    pos += dur;
                }
            }
            out
        }
    }
}

fn reverb_impulse(sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = (0.15 * sr) as usize;
    let mut h: Vec<f64> = (0..n).map(|k| 0.3 * gauss(rng) * (-(k as f64) / (0.04 * sr)).exp()).collect();
    h[0] = 1.0;
    h
}

fn audio_features(cfg: &CorpusConfig, signal: &[f64], rel: &ReliabilityStream<f64>) -> Result<FeatureStream<f64>> {
    let mfcc = MfccExtractor::new(cfg.sample_rate, DEFAULT_MFCC_COUNT)?;
    let (flen, shift) = (frame_len(cfg.sample_rate), frame_shift_samples(cfg.sample_rate));
    let pitch: Vec<Vec<f64>> = ["f0", "df0", "pov"].iter().map(|c| rel.column(c)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(rel.len());
    for t in 0..rel.len() {
        let mut row = mfcc.log_mel(&signal[t * shift..t * shift + flen])?;
        row.extend(pitch.iter().map(|p| p[t]));
        rows.push(row);
    }
    FeatureStream::new(Tensor::from_rows(&rows)?, crate::reliability::SHIFT_SECONDS, Modality::Audio)
}

/// Width of the audio feature rows: log mel bands plus f0, delta f0 and voicing.
pub const AUDIO_DIM: usize = crate::reliability::MEL_BANDS + 3;

fn token_at(segments: &[Segment], frame: usize) -> Option<usize> {
    segments.iter().find(|s| frame >= s.start && frame < s.start + s.frames).and_then(|s| s.token)
}

fn render_video(
    cfg: &CorpusConfig,
    protos: &Prototypes,
    script: &Script,
    cond: &Condition,
    rng: &mut ChaCha8Rng,
) -> Result<(FeatureStream<f64>, ReliabilityStream<f64>)> {
    let n_v = script.frames.div_ceil(VIDEO_RATIO);
    let base: Vec<Vec<f64>> = (0..n_v)
        .map(|v| {
            let tok = token_at(&script.segments, (VIDEO_RATIO * v + VIDEO_RATIO / 2).min(script.frames - 1));
            let vis = viseme_of(tok);
            let mut row = protos.visemes[vis].clone();
            if let Some(t) = tok.filter(|&t| t >= FIRST_LETTER) {
                for (r, o) in row.iter_mut().zip(&protos.letter_offsets[t - FIRST_LETTER]) {
                    *r += cfg.video_pair_offset * o;
                }
            }
            row
        })
        .collect();
    let mut data = Vec::with_capacity(n_v * VIDEO_DIM);
    let mut vis_rows = Vec::with_capacity(n_v);
    for v in 0..n_v {
        let prev = &base[v.saturating_sub(1)];
        let next = &base[(v + 1).min(n_v - 1)];
        for d in 0..VIDEO_DIM {
            data.push(0.25 * prev[d] + 0.5 * base[v][d] + 0.25 * next[d] + cfg.video_jitter * gauss(rng));
        }
        vis_rows.push(viseme_of(token_at(&script.segments, (VIDEO_RATIO * v + VIDEO_RATIO / 2).min(script.frames - 1))));
    }
    let mut video = FeatureStream::new(Tensor::matrix(n_v, VIDEO_DIM, data), VIDEO_SHIFT, Modality::Video)?;
    let strength = cond.visual.map_or(0.0, |c| c.strength);
    if let Some(vc) = cond.visual {
        video = visual_corrupt(&video, vc.kind, vc.strength, rng.gen())?;
    }
    let mut rel = Vec::with_capacity(n_v * 7);
    for &vis in &vis_rows {
        rel.push((0.92 - 0.7 * strength + 0.03 * gauss(rng)).clamp(0.0, 1.0));
        for au in &protos.action_units[vis] {
            rel.push((au + (0.2 + 1.5 * strength) * gauss(rng)).max(0.0));
        }
    }
    let video_rel = ReliabilityStream::new(Tensor::matrix(n_v, 7, rel), video_columns())?;
    Ok((video, video_rel))
}

/// Renders utterance `index` of `split` under `cond`.
pub fn render_utterance(cfg: &CorpusConfig, protos: &Prototypes, split: Split, index: usize, cond: &Condition) -> Result<Utterance> {
    let script = draw_script(cfg, protos, split, index)?;
    let mut rng = rng_for(&[cfg.seed, split.tag(), index as u64, 2]);
    let clean = render_clean(cfg, &script, &mut rng);
    let sr = cfg.sample_rate as f64;
    // Condition-specific randomness, independent of the script draws.
    let snr_bits = cond.snr_db.to_bits();
    let mut crng = rng_for(&[cfg.seed, split.tag(), index as u64, 3, cond.noise as u64, snr_bits, u64::from(cond.reverb)]);
    let mut signal = if cond.reverb { apply_reverb(&clean, &reverb_impulse(sr, &mut crng))? } else { clean };
    if cond.snr_db.is_finite() {
        let noise = render_noise(cond.noise, signal.len() + cfg.sample_rate / 2, sr, &mut crng);
        signal = mix_noise_at_snr(&signal, &noise, cond.snr_db, crng.gen())?;
    }
    let audio_rel = extract_audio_reliability(&signal, cfg.sample_rate, DEFAULT_MFCC_COUNT)?;
    let audio = audio_features(cfg, &signal, &audio_rel)?;
    let vbits = cond.visual.map_or(0, |v| v.strength.to_bits() ^ (v.kind as u64 + 1));
    let mut vrng = rng_for(&[cfg.seed, split.tag(), index as u64, 4, vbits]);
    let (video, video_rel) = render_video(cfg, protos, &script, cond, &mut vrng)?;
    Ok(Utterance {
        id: format!("{}{:05}", split.name(), index),
        text: script.text,
        labels: script.labels,
        segments: script.segments,
        audio,
        video,
        audio_rel,
        video_rel,
        condition: *cond,
    })
}

/// Corruption of training (and dev) utterance `index`.
pub fn training_condition(cfg: &CorpusConfig, split: Split, index: usize) -> Condition {
    let mut rng = rng_for(&[cfg.seed, split.tag(), index as u64, 5]);
    let noise = if rng.gen_bool(cfg.train_music_fraction) { NoiseKind::Music } else { NoiseKind::Ambient };
    let snr_db = if rng.gen_bool(cfg.train_clean_fraction) { CLEAN_SNR } else { cfg.train_snrs[rng.gen_range(0..cfg.train_snrs.len())] };
    let visual = rng.gen_bool(cfg.train_visual_fraction).then(|| VisualCondition {
        kind: if rng.gen_bool(0.5) { VisualCorruption::GaussianBlur } else { VisualCorruption::SaltPepper },
        strength: rng.gen_range(0.2..1.0),
    });
    Condition { noise, snr_db, visual, reverb: false }
}

/// Renders a whole split; `cond` gives the corruption per utterance index.
pub fn render_split(cfg: &CorpusConfig, protos: &Prototypes, split: Split, cond: impl Fn(usize) -> Condition) -> Result<Vec<Utterance>> {
    let n = match split {
        Split::Train => cfg.train,
        Split::Dev => cfg.dev,
        Split::Test => cfg.test,
    };
    (0..n).map(|i| render_utterance(cfg, protos, split, i, &cond(i))).collect()
}

/// Train and dev draw random corruptions; test is rendered clean (the sweep re-renders it).
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let protos = Prototypes::new(cfg);
    Ok(Corpus {
        config: cfg.clone(),
        train: render_split(cfg, &protos, Split::Train, |i| training_condition(cfg, Split::Train, i))?,
        dev: render_split(cfg, &protos, Split::Dev, |i| training_condition(cfg, Split::Dev, i))?,
        test: render_split(cfg, &protos, Split::Test, |_| Condition::clean())?,
    })
}

const MANIFEST_HEADER: [&str; 8] = ["id", "text", "noise", "snr_db", "visual", "strength", "reverb", "segments"];

fn fmt_segments(segs: &[Segment]) -> String {
    segs.iter()
        .map(|s| format!("{}:{}:{}", s.token.map_or("-".to_string(), |t| t.to_string()), s.start, s.frames))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_segments(s: &str) -> Result<Vec<Segment>> {
    s.split(',')
        .map(|part| {
            let f: Vec<&str> = part.split(':').collect();
            let bad = || Error::Format(format!("bad segment `{part}`"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(Segment {
                token: if f[0] == "-" { None } else { Some(f[0].parse().map_err(|_| bad())?) },
                start: f[1].parse().map_err(|_| bad())?,
                frames: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Writes `corpus.toml`, one manifest TSV per split and four files per utterance.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cfg = toml::to_string(&corpus.config).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("corpus.toml"), cfg)?;
    for split in Split::ALL {
        let sub = dir.join(split.name());
        std::fs::create_dir_all(&sub)?;
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(dir.join(format!("{}.tsv", split.name()))).map_err(csv_err)?;
        w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
        for u in corpus.split(split) {
            let c = &u.condition;
            w.write_record([
                u.id.clone(),
                u.text.clone(),
                c.noise.to_string(),
                format!("{}", c.snr_db),
                c.visual.map_or("vc".to_string(), |v| v.kind.to_string()),
                format!("{}", c.visual.map_or(0.0, |v| v.strength)),
                u8::from(c.reverb).to_string(),
                fmt_segments(&u.segments),
            ])
            .map_err(csv_err)?;
            u.audio.save(&sub.join(format!("{}.audio.feat", u.id)))?;
            u.video.save(&sub.join(format!("{}.video.feat", u.id)))?;
            FeatureFile::new(u.audio_rel.frames.clone())
                .with("columns", u.audio_rel.columns.join(","))
                .save(&sub.join(format!("{}.arel.feat", u.id)))?;
            write_visual_reliability(&sub.join(format!("{}.vrel.tsv", u.id)), &u.video_rel)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn load_corpus_config(dir: &Path) -> Result<CorpusConfig> {
    let path = dir.join("corpus.toml");
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    toml::from_str(&std::fs::read_to_string(&path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Utterance>> {
    let path = dir.join(format!("{}.tsv", split.name()));
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(&path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != MANIFEST_HEADER {
        return Err(Error::Schema(format!("{}: unexpected manifest header {header:?}", path.display())));
    }
    let sub = dir.join(split.name());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let bad = |what: &str| Error::Schema(format!("{}: bad {what} for `{}`", path.display(), field(0)));
        let visual = match field(4) {
            "vc" => None,
            k => Some(VisualCondition { kind: k.parse()?, strength: field(5).parse().map_err(|_| bad("strength"))? }),
        };
        let condition = Condition {
            noise: field(2).parse()?,
            snr_db: field(3).parse().map_err(|_| bad("snr_db"))?,
            visual,
            reverb: field(6) == "1",
        };
        let id = field(0).to_string();
        let audio = FeatureStream::load(&sub.join(format!("{id}.audio.feat")))?;
        let video = FeatureStream::load(&sub.join(format!("{id}.video.feat")))?;
        let arel = FeatureFile::<f64>::load(&sub.join(format!("{id}.arel.feat")))?;
        let columns = arel.require("columns")?.split(',').map(str::to_string).collect();
        let audio_rel = ReliabilityStream::new(arel.data, columns)?;
        let video_rel = load_visual_reliability(&sub.join(format!("{id}.vrel.tsv")), Some(video.len()))?;
        out.push(Utterance {
            text: field(1).to_string(),
            labels: text::encode(field(1))?,
            segments: parse_segments(field(7))?,
            id,
            audio,
            video,
            audio_rel,
            video_rel,
            condition,
        });
    }
    Ok(out)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    Ok(Corpus {
        config: load_corpus_config(dir)?,
        train: load_split(dir, Split::Train)?,
        dev: load_split(dir, Split::Dev)?,
        test: load_split(dir, Split::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig { train: 6, dev: 2, test: 3, ..CorpusConfig::default() }
    }

    #[test]
    fn shapes_and_alignment_contract() {
        let cfg = small();
        let c = gen_corpus(&cfg).unwrap();
        for u in c.train.iter().chain(&c.test) {
            let n = u.audio.len();
            assert_eq!(u.audio.dim(), AUDIO_DIM);
            assert_eq!(u.audio_rel.len(), n);
            assert_eq!(u.video.len(), n.div_ceil(4));
            assert_eq!(u.video_rel.len(), u.video.len());
            assert_eq!(u.segments.iter().map(|s| s.frames).sum::<usize>(), n);
            assert!(!u.labels.is_empty());
            assert!(u.audio.frames().all_finite() && u.audio_rel.frames.all_finite());
            assert_eq!(text::decode(&u.labels), u.text);
        }
        let conf = c.test[0].video_rel.column("confidence").unwrap();
        assert!(conf.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rerendering_shares_the_script() {
        let cfg = small();
        let p = Prototypes::new(&cfg);
        let a = render_utterance(&cfg, &p, Split::Test, 1, &Condition::clean()).unwrap();
        let b = render_utterance(&cfg, &p, Split::Test, 1, &Condition::audio(NoiseKind::Music, -6.0)).unwrap();
        assert_eq!(a.text, b.text);
        assert_eq!(a.segments, b.segments);
        assert_eq!(a.video, b.video);
        assert_ne!(a.audio, b.audio);
        let snr_a = a.audio_rel.column("snr_est").unwrap();
        let snr_b = b.audio_rel.column("snr_est").unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&snr_b) < mean(&snr_a));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            CorpusConfig { word_len: [3, 2], ..small() },
            CorpusConfig { test: 0, ..small() },
            CorpusConfig { lexicon: 10_000, word_len: [1, 1], ..small() },
            CorpusConfig { train_clean_fraction: 1.5, ..small() },
        ] {
            assert!(matches!(gen_corpus(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn disk_round_trip() {
        let cfg = CorpusConfig { train: 2, dev: 1, test: 1, ..CorpusConfig::default() };
        let c = gen_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &c).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back, c);
        assert!(matches!(load_corpus(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
    }

    /// Nearest-template token classifier on ground-truth segments: templates
    /// are per-letter means of segment-averaged, gain-normalised log mel rows.
    fn oracle_accuracy(train: &[Utterance], test: &[Utterance]) -> f64 {
        let seg_vec = |u: &Utterance, s: &Segment| -> Vec<f64> {
            let bands = crate::reliability::MEL_BANDS;
            let mut v = vec![0.0; bands];
            // Inner frames only; edges overlap neighbouring tokens.
            let (a, b) = (s.start + 2, s.start + s.frames - 2);
            for t in a..b {
                for (acc, x) in v.iter_mut().zip(&u.audio.frames().row(t)[..bands]) {
                    *acc += x / (b - a) as f64;
                }
            }
            let m = v.iter().sum::<f64>() / bands as f64;
            v.iter().map(|x| x - m).collect()
        };
        let letters = LETTERS.len();
        let mut tmpl = vec![vec![0.0; crate::reliability::MEL_BANDS]; letters];
        let mut counts = vec![0usize; letters];
        for u in train {
            for s in u.segments.iter().filter(|s| s.token.is_some_and(|t| t >= FIRST_LETTER)) {
                let k = s.token.unwrap() - FIRST_LETTER;
                for (a, x) in tmpl[k].iter_mut().zip(seg_vec(u, s)) {
                    *a += x;
                }
                counts[k] += 1;
            }
        }
        for (t, &c) in tmpl.iter_mut().zip(&counts) {
            t.iter_mut().for_each(|x| *x /= c.max(1) as f64);
        }
        let (mut ok, mut n) = (0, 0);
        for u in test {
            for s in u.segments.iter().filter(|s| s.token.is_some_and(|t| t >= FIRST_LETTER)) {
                let v = seg_vec(u, s);
                let best = (0..letters)
                    .min_by(|&a, &b| {
                        let d = |k: usize| tmpl[k].iter().zip(&v).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
                        d(a).partial_cmp(&d(b)).unwrap()
                    })
                    .unwrap();
                ok += usize::from(best + FIRST_LETTER == s.token.unwrap());
                n += 1;
            }
        }
        ok as f64 / n as f64
    }

    #[test]
    fn oracle_classifier_separates_clean_tokens_and_degrades_with_noise() {
        let cfg = CorpusConfig { train: 40, test: 30, ..CorpusConfig::default() };
        let p = Prototypes::new(&cfg);
        let train = render_split(&cfg, &p, Split::Train, |_| Condition::clean()).unwrap();
        let clean = render_split(&cfg, &p, Split::Test, |_| Condition::clean()).unwrap();
        let noisy = render_split(&cfg, &p, Split::Test, |_| Condition::audio(NoiseKind::Music, -12.0)).unwrap();
        let acc_clean = oracle_accuracy(&train, &clean);
        let acc_noisy = oracle_accuracy(&train, &noisy);
        eprintln!("oracle accuracy clean {acc_clean} at -12 dB {acc_noisy}");
        assert!(acc_clean > 0.99, "{acc_clean}");
        assert!(acc_noisy < acc_clean);
    }
}
