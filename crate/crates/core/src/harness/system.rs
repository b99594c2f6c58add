//! The five recognisers of the experiment, assembled from the library
//! blocks, with their training losses and decoding paths.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::corpus::{Utterance, AUDIO_DIM, VIDEO_DIM};
use super::text::EOS;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::ctc::{ctc_nll, PosteriorGrid};
use crate::decoding::{joint_beam_search, BeamConfig, DecoderScorer, LmConfig, LstmLm, S2sScorer};
use crate::error::{Error, Result};
use crate::fusion::{ConcatFusion, DfnCtc, DfnS2s, FusionConfig, StreamWeightFusion, TokenAligner};
use crate::nn::Standardizer;
use crate::reliability::{assemble_reliability, DEFAULT_MFCC_COUNT, VIDEO_COLUMNS};
use crate::streams::Modality;
use crate::tensor::Tensor;
use crate::transformer::{CtcDecoder, Decoder, Encoder, ModelConfig, ReliabilityEncoder};

/// Audio reliability width: MFCCs, SNR estimate, f0, delta f0, voicing.
pub const AUDIO_REL_DIM: usize = DEFAULT_MFCC_COUNT + 4;
pub const VIDEO_REL_DIM: usize = VIDEO_COLUMNS.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Ao,
    Vo,
    AvConcat,
    Dfn,
    StreamWeight,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Ao, Mode::Vo, Mode::AvConcat, Mode::Dfn, Mode::StreamWeight];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Ao => "ao",
            Mode::Vo => "vo",
            Mode::AvConcat => "av_concat",
            Mode::Dfn => "dfn",
            Mode::StreamWeight => "stream_weight",
        }
    }

    /// Row label stem used in the sweep table.
    pub fn table_name(self) -> &'static str {
        match self {
            Mode::Ao => "AO",
            Mode::Vo => "VO",
            Mode::AvConcat => "AV",
            Mode::Dfn => "DFN",
            Mode::StreamWeight => "SW",
        }
    }

    pub fn uses_audio(self) -> bool {
        self != Mode::Vo
    }

    pub fn uses_video(self) -> bool {
        self != Mode::Ao
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// Encoder input of one modality: audio frames, or video frames upsampled
/// to the audio frame count so both encoders emit `N_F/4` rows.
pub fn stream_input(utt: &Utterance, modality: Modality) -> Result<Tensor<f64>> {
    Ok(match modality {
        Modality::Audio => utt.audio.frames().clone(),
        Modality::Video => utt.video.align_to(utt.audio.len())?.into_frames(),
    })
}

/// Assembled reliability matrices at the encoder output rate.
pub fn reliability_inputs(utt: &Utterance) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let (a, v) = assemble_reliability(&utt.audio_rel, &utt.video_rel, utt.audio.len(), utt.video.len())?;
    Ok((a.frames, v.frames))
}

/// `[sos] + labels` decoder input and `labels + [eos]` targets.
pub fn teacher_forcing(labels: &[usize]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut input = vec![EOS];
    input.extend_from_slice(labels);
    let targets = labels.iter().chain(std::iter::once(&EOS)).copied().enumerate().collect();
    (input, targets)
}

/// `alpha * CTC + (1 - alpha) * CE`; a zero weight drops its branch entirely.
pub fn joint_loss(g: &mut Graph<f64>, ctc_logp: Var, s2s_logp: Var, labels: &[usize], blank: usize, alpha: f64) -> Result<Var> {
    let (_, targets) = teacher_forcing(labels);
    let ctc = (alpha > 0.0).then(|| ctc_nll(g, ctc_logp, labels, blank)).transpose()?;
    let ce = (alpha < 1.0).then(|| {
        let ll = g.pick_sum(s2s_logp, &targets);
        g.scale(ll, -1.0)
    });
    Ok(match (ctc, ce) {
        (Some(c), Some(e)) => {
            let c = g.scale(c, alpha);
            let e = g.scale(e, 1.0 - alpha);
            g.add(c, e)
        }
        (Some(c), None) => c,
        (None, Some(e)) => e,
        (None, None) => unreachable!("alpha is either > 0 or < 1"),
    })
}

/// Input standardisation followed by the subsampling transformer encoder.
#[derive(Clone, Debug)]
pub struct Frontend {
    pub norm: Standardizer,
    pub encoder: Encoder,
}

impl Frontend {
    pub fn new(store: &mut ParamStore<f64>, name: &str, d_in: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { norm: Standardizer::new(store, &format!("{name}.stats"), d_in)?, encoder: Encoder::new(store, name, d_in, cfg)? })
    }

    pub fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, x: &Tensor<f64>) -> Var {
        let x = g.input(self.norm.apply(store, x));
        self.encoder.forward(g, store, x).0
    }

    pub fn encode(&self, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::eval();
        let h = self.forward(&mut g, store, x);
        g.take_value(h)
    }
}

/// One modality with its own CTC and attention decoders.
#[derive(Clone, Debug)]
pub struct SingleStream {
    pub modality: Modality,
    pub front: Frontend,
    pub s2s: Decoder,
    pub ctc: CtcDecoder,
}

fn suffix(m: Modality) -> &'static str {
    match m {
        Modality::Audio => "a",
        Modality::Video => "v",
    }
}

impl SingleStream {
    pub fn new(store: &mut ParamStore<f64>, modality: Modality, cfg: &ModelConfig) -> Result<Self> {
        let (enc, d_in) = match modality {
            Modality::Audio => ("encoder.audio", AUDIO_DIM),
            Modality::Video => ("encoder.video", VIDEO_DIM),
        };
        let s = suffix(modality);
        Ok(Self {
            modality,
            front: Frontend::new(store, enc, d_in, cfg)?,
            s2s: Decoder::new(store, &format!("decoder.s2s.{s}"), cfg)?,
            ctc: CtcDecoder::new(store, &format!("decoder.ctc.{s}"), cfg)?,
        })
    }

    /// Parameter name prefixes owned by this system.
    pub fn prefixes(&self) -> Vec<String> {
        let s = suffix(self.modality);
        let enc = match self.modality {
            Modality::Audio => "encoder.audio.",
            Modality::Video => "encoder.video.",
        };
        vec![enc.to_string(), format!("decoder.s2s.{s}."), format!("decoder.ctc.{s}.")]
    }

    pub fn loss(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, utt: &Utterance, alpha: f64) -> Result<Var> {
        let x = stream_input(utt, self.modality)?;
        let h = self.front.forward(g, store, &x);
        let (ctc_logp, _) = self.ctc.forward(g, store, h);
        let (input, _) = teacher_forcing(&utt.labels);
        let out = self.s2s.forward(g, store, &input, h);
        joint_loss(g, ctc_logp, out.logp, &utt.labels, self.ctc.blank, alpha)
    }

    pub fn encode(&self, store: &ParamStore<f64>, utt: &Utterance) -> Result<Tensor<f64>> {
        Ok(self.front.encode(store, &stream_input(utt, self.modality)?))
    }

    pub fn ctc_grid(&self, store: &ParamStore<f64>, h: &Tensor<f64>) -> Result<PosteriorGrid<f64>> {
        crate::transformer::ctc_decoder_forward(h, &self.ctc, store)
    }
}

/// Encoder-output concatenation baseline with one shared decoder pair.
#[derive(Clone, Debug)]
pub struct AvConcat {
    pub audio: Frontend,
    pub video: Frontend,
    pub fuse: ConcatFusion,
    pub s2s: Decoder,
    pub ctc: CtcDecoder,
}

impl AvConcat {
    pub fn new(store: &mut ParamStore<f64>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            audio: Frontend::new(store, "encoder.audio", AUDIO_DIM, cfg)?,
            video: Frontend::new(store, "encoder.video", VIDEO_DIM, cfg)?,
            fuse: ConcatFusion::new(store, "fusion.concat", cfg.d_att)?,
            s2s: Decoder::new(store, "decoder.s2s.av", cfg)?,
            ctc: CtcDecoder::new(store, "decoder.ctc.av", cfg)?,
        })
    }

    /// Starts from the single-stream encoders and the audio decoders, with a
    /// projection that passes the audio encoding through unchanged.
    pub fn init_from(&self, store: &mut ParamStore<f64>, ao: &ParamStore<f64>, vo: &ParamStore<f64>) -> Result<()> {
        for e in ao.entries() {
            let name = if e.name.starts_with("encoder.audio.") {
                e.name.clone()
            } else if let Some(rest) = e.name.strip_prefix("decoder.s2s.a.") {
                format!("decoder.s2s.av.{rest}")
            } else if let Some(rest) = e.name.strip_prefix("decoder.ctc.a.") {
                format!("decoder.ctc.av.{rest}")
            } else {
                continue;
            };
            copy_into(store, &name, &e.value)?;
        }
        for e in vo.entries().iter().filter(|e| e.name.starts_with("encoder.video.")) {
            copy_into(store, &e.name, &e.value)?;
        }
        let d = self.fuse.proj.d_out;
        let mut w = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            w.set(i, i, 1.0);
        }
        *store.value_mut(self.fuse.proj.w) = w;
        store.value_mut(self.fuse.proj.b).data_mut().fill(0.0);
        Ok(())
    }

    fn memory(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, utt: &Utterance) -> Result<Var> {
        let ha = self.audio.forward(g, store, &stream_input(utt, Modality::Audio)?);
        let hv = self.video.forward(g, store, &stream_input(utt, Modality::Video)?);
        Ok(self.fuse.forward(g, store, ha, hv))
    }

    pub fn loss(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, utt: &Utterance, alpha: f64) -> Result<Var> {
        let h = self.memory(g, store, utt)?;
        let (ctc_logp, _) = self.ctc.forward(g, store, h);
        let (input, _) = teacher_forcing(&utt.labels);
        let out = self.s2s.forward(g, store, &input, h);
        joint_loss(g, ctc_logp, out.logp, &utt.labels, self.ctc.blank, alpha)
    }

    pub fn encode(&self, store: &ParamStore<f64>, utt: &Utterance) -> Result<Tensor<f64>> {
        let mut g = Graph::eval();
        let h = self.memory(&mut g, store, utt)?;
        Ok(g.take_value(h))
    }
}

fn copy_into(store: &mut ParamStore<f64>, name: &str, value: &Tensor<f64>) -> Result<()> {
    let id = store.id(name)?;
    if store.value(id).shape() != value.shape() {
        return Err(Error::shape("copy_into", format!("`{name}` is {:?}, source {:?}", store.value(id).shape(), value.shape())));
    }
    *store.value_mut(id) = value.clone();
    Ok(())
}

/// The fusion rule applied on top of the two frozen single-stream systems.
#[derive(Clone, Debug)]
pub enum FusionHead {
    Dfn { ctc: DfnCtc, s2s: DfnS2s },
    StreamWeight(StreamWeightFusion),
}

/// Reliability-guided fusion of an audio-only and a video-only system.
#[derive(Clone, Debug)]
pub struct FusedSystem {
    pub ao: SingleStream,
    pub vo: SingleStream,
    pub rel_a: ReliabilityEncoder,
    pub rel_v: ReliabilityEncoder,
    pub align_a: TokenAligner,
    pub align_v: TokenAligner,
    pub head: FusionHead,
}

/// Frozen upstream outputs of one stream for one utterance.
#[derive(Clone, Debug)]
pub struct StreamPosteriors {
    pub grid: Tensor<f64>,
    /// Teacher-forced token log-posteriors, `N_T + 1` rows.
    pub s2s: Tensor<f64>,
    /// Final decoder block cross-attention transforms, one per head.
    pub transforms: Vec<Tensor<f64>>,
}

struct UpstreamVars {
    pa: Var,
    pv: Var,
    sa: Var,
    sv: Var,
    ta: Vec<Var>,
    tv: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FusionInputs {
    pub audio: StreamPosteriors,
    pub video: StreamPosteriors,
    pub rel_a: Tensor<f64>,
    pub rel_v: Tensor<f64>,
}

impl FusedSystem {
    pub fn new(store: &mut ParamStore<f64>, mode: Mode, cfg: &ModelConfig, fcfg: &FusionConfig) -> Result<Self> {
        let ao = SingleStream::new(store, Modality::Audio, cfg)?;
        let vo = SingleStream::new(store, Modality::Video, cfg)?;
        let tag = match mode {
            Mode::Dfn => "dfn",
            Mode::StreamWeight => "sw",
            other => return Err(Error::InvalidArgument(format!("{other} is not a fusion mode"))),
        };
        let rel_a = ReliabilityEncoder::new(store, "encoder.reliability.a", AUDIO_REL_DIM, cfg.d_att)?;
        let rel_v = ReliabilityEncoder::new(store, "encoder.reliability.v", VIDEO_REL_DIM, cfg.d_att)?;
        let align_a = TokenAligner::new(store, &format!("fusion.{tag}.align.a"), cfg.d_att, cfg.heads)?;
        let align_v = TokenAligner::new(store, &format!("fusion.{tag}.align.v"), cfg.d_att, cfg.heads)?;
        let head = match mode {
            Mode::Dfn => FusionHead::Dfn {
                ctc: DfnCtc::new(store, "fusion.dfn.ctc", cfg.vocab, cfg.d_att, fcfg)?,
                s2s: DfnS2s::new(store, "fusion.dfn.s2s", cfg.vocab, cfg.d_att, fcfg)?,
            },
            _ => FusionHead::StreamWeight(StreamWeightFusion::new(store, "fusion.sw.weights", cfg.d_att, fcfg)?),
        };
        Ok(Self { ao, vo, rel_a, rel_v, align_a, align_v, head })
    }

    pub fn upstream_prefixes(&self) -> Vec<String> {
        let mut p = self.ao.prefixes();
        p.extend(self.vo.prefixes());
        p
    }

    fn stream(&self, store: &ParamStore<f64>, sys: &SingleStream, utt: &Utterance) -> Result<StreamPosteriors> {
        let h = sys.encode(store, utt)?;
        let grid = sys.ctc_grid(store, &h)?.into_tensor();
        let (input, _) = teacher_forcing(&utt.labels);
        let (s2s, ts) = crate::transformer::decoder_forward(&input, &h, &sys.s2s, store)?;
        Ok(StreamPosteriors { grid, s2s, transforms: ts.into_iter().map(|t| t.matrix).collect() })
    }

    /// Upstream posteriors and reliability computed once per utterance.
    pub fn inputs(&self, store: &ParamStore<f64>, utt: &Utterance) -> Result<FusionInputs> {
        let (rel_a, rel_v) = reliability_inputs(utt)?;
        Ok(FusionInputs { audio: self.stream(store, &self.ao, utt)?, video: self.stream(store, &self.vo, utt)?, rel_a, rel_v })
    }

    fn head_forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, up: &UpstreamVars, rel_a: &Tensor<f64>, rel_v: &Tensor<f64>) -> (Var, Var) {
        let xa = self.rel_a.forward(g, store, rel_a);
        let xv = self.rel_v.forward(g, store, rel_v);
        let xta = self.align_a.forward(g, store, xa, &up.ta);
        let xtv = self.align_v.forward(g, store, xv, &up.tv);
        let UpstreamVars { pa, pv, sa, sv, .. } = *up;
        match &self.head {
            FusionHead::Dfn { ctc, s2s } => (ctc.forward(g, store, [pa, pv, xa, xv]), s2s.forward(g, store, [sa, sv, xta, xtv])),
            FusionHead::StreamWeight(sw) => (sw.fuse(&sw.ctc, g, store, pa, pv, xa, xv), sw.fuse(&sw.s2s, g, store, sa, sv, xta, xtv)),
        }
    }

    /// Fused `(ctc, s2s)` log-posterior nodes from cached upstream values.
    pub fn fused(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, inp: &FusionInputs) -> (Var, Var) {
        let up = UpstreamVars {
            pa: g.input(inp.audio.grid.clone()),
            pv: g.input(inp.video.grid.clone()),
            sa: g.input(inp.audio.s2s.clone()),
            sv: g.input(inp.video.s2s.clone()),
            ta: inp.audio.transforms.iter().map(|t| g.input(t.clone())).collect(),
            tv: inp.video.transforms.iter().map(|t| g.input(t.clone())).collect(),
        };
        self.head_forward(g, store, &up, &inp.rel_a, &inp.rel_v)
    }

    fn stream_vars(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, sys: &SingleStream, utt: &Utterance) -> Result<(Var, Var, Vec<Var>)> {
        let h = sys.front.forward(g, store, &stream_input(utt, sys.modality)?);
        let (grid, _) = sys.ctc.forward(g, store, h);
        let (input, _) = teacher_forcing(&utt.labels);
        let out = sys.s2s.forward(g, store, &input, h);
        Ok((grid, out.logp, out.final_transforms().to_vec()))
    }

    /// Joint loss with the single-stream systems inside the graph, for fine-tuning them too.
    pub fn loss_end_to_end(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, utt: &Utterance, alpha: f64) -> Result<Var> {
        let (pa, sa, ta) = self.stream_vars(g, store, &self.ao, utt)?;
        let (pv, sv, tv) = self.stream_vars(g, store, &self.vo, utt)?;
        let (rel_a, rel_v) = reliability_inputs(utt)?;
        let (c, s) = self.head_forward(g, store, &UpstreamVars { pa, pv, sa, sv, ta, tv }, &rel_a, &rel_v);
        joint_loss(g, c, s, &utt.labels, self.ao.ctc.blank, alpha)
    }

    pub fn loss(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, inp: &FusionInputs, labels: &[usize], alpha: f64) -> Result<Var> {
        let (c, s) = self.fused(g, store, inp);
        joint_loss(g, c, s, labels, self.ao.ctc.blank, alpha)
    }
}

/// Per-prefix fused token posteriors during search: both decoders run on
/// the prefix, and the last row of each final-block transform aligns `ξ`.
pub struct FusedScorer<'a> {
    pub sys: &'a FusedSystem,
    pub store: &'a ParamStore<f64>,
    pub h_a: Tensor<f64>,
    pub h_v: Tensor<f64>,
    pub xi_a: Tensor<f64>,
    pub xi_v: Tensor<f64>,
}

fn last_row(t: &Tensor<f64>) -> Tensor<f64> {
    t.slice_rows(t.rows() - 1, 1)
}

impl S2sScorer<f64> for FusedScorer<'_> {
    fn next_logp(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let (la, ta) = crate::transformer::decoder_forward(prefix, &self.h_a, &self.sys.ao.s2s, self.store)?;
        let (lv, tv) = crate::transformer::decoder_forward(prefix, &self.h_v, &self.sys.vo.s2s, self.store)?;
        let mut g = Graph::eval();
        let s = self.store;
        let xa = g.input(self.xi_a.clone());
        let xv = g.input(self.xi_v.clone());
        let ta: Vec<Var> = ta.iter().map(|t| g.input(last_row(&t.matrix))).collect();
        let tv: Vec<Var> = tv.iter().map(|t| g.input(last_row(&t.matrix))).collect();
        let xta = self.sys.align_a.forward(&mut g, s, xa, &ta);
        let xtv = self.sys.align_v.forward(&mut g, s, xv, &tv);
        let sa = g.input(last_row(&la));
        let sv = g.input(last_row(&lv));
        let y = match &self.sys.head {
            FusionHead::Dfn { s2s, .. } => s2s.forward(&mut g, s, [sa, sv, xta, xtv]),
            FusionHead::StreamWeight(sw) => sw.fuse(&sw.s2s, &mut g, s, sa, sv, xta, xtv),
        };
        Ok(g.take_value(y).into_data())
    }
}

/// Fused CTC grid plus the pieces the token scorer needs.
pub struct FusedDecodeState {
    pub grid: PosteriorGrid<f64>,
    pub h_a: Tensor<f64>,
    pub h_v: Tensor<f64>,
    pub xi_a: Tensor<f64>,
    pub xi_v: Tensor<f64>,
}

impl FusedSystem {
    pub fn decode_state(&self, store: &ParamStore<f64>, utt: &Utterance) -> Result<FusedDecodeState> {
        let h_a = self.ao.encode(store, utt)?;
        let h_v = self.vo.encode(store, utt)?;
        let pa = self.ao.ctc_grid(store, &h_a)?.into_tensor();
        let pv = self.vo.ctc_grid(store, &h_v)?.into_tensor();
        let (ra, rv) = reliability_inputs(utt)?;
        let mut g = Graph::eval();
        let xa = self.rel_a.forward(&mut g, store, &ra);
        let xv = self.rel_v.forward(&mut g, store, &rv);
        let (pa, pv) = (g.input(pa), g.input(pv));
        let fused = match &self.head {
            FusionHead::Dfn { ctc, .. } => ctc.forward(&mut g, store, [pa, pv, xa, xv]),
            FusionHead::StreamWeight(sw) => sw.fuse(&sw.ctc, &mut g, store, pa, pv, xa, xv),
        };
        let grid = PosteriorGrid::new(g.take_value(fused), self.ao.ctc.blank)?;
        Ok(FusedDecodeState { grid, h_a, h_v, xi_a: g.take_value(xa), xi_v: g.take_value(xv) })
    }
}

/// Character LM over the training transcripts.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub lm: LstmLm,
}

impl LanguageModel {
    pub fn new(store: &mut ParamStore<f64>, cfg: &LmConfig) -> Result<Self> {
        Ok(Self { lm: LstmLm::new(store, "lm", cfg)? })
    }

    pub fn loss(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, labels: &[usize]) -> Var {
        let (input, targets) = teacher_forcing(labels);
        let y = self.lm.forward(g, store, &input);
        let ll = g.pick_sum(y, &targets);
        g.scale(ll, -1.0)
    }
}

/// A trained recogniser of any mode with its parameters.
pub enum Recognizer {
    Single(SingleStream, ParamStore<f64>),
    Concat(AvConcat, ParamStore<f64>),
    Fused(FusedSystem, ParamStore<f64>),
}

impl Recognizer {
    /// Builds the network for `mode`, registering any parameter `store` lacks.
    pub fn build(mode: Mode, mut store: ParamStore<f64>, cfg: &ModelConfig, fcfg: &FusionConfig) -> Result<Self> {
        Ok(match mode {
            Mode::Ao => Recognizer::Single(SingleStream::new(&mut store, Modality::Audio, cfg)?, store),
            Mode::Vo => Recognizer::Single(SingleStream::new(&mut store, Modality::Video, cfg)?, store),
            Mode::AvConcat => Recognizer::Concat(AvConcat::new(&mut store, cfg)?, store),
            Mode::Dfn | Mode::StreamWeight => Recognizer::Fused(FusedSystem::new(&mut store, mode, cfg, fcfg)?, store),
        })
    }

    /// As [`Recognizer::build`], but every parameter must already be present.
    pub fn from_checkpoint(mode: Mode, store: ParamStore<f64>, cfg: &ModelConfig, fcfg: &FusionConfig) -> Result<Self> {
        let before = store.len();
        let r = Self::build(mode, store, cfg, fcfg)?;
        if r.store().len() != before {
            return Err(Error::Format(format!("checkpoint for {mode} is missing {} parameters", r.store().len() - before)));
        }
        Ok(r)
    }

    pub fn store(&self) -> &ParamStore<f64> {
        match self {
            Recognizer::Single(_, s) | Recognizer::Concat(_, s) | Recognizer::Fused(_, s) => s,
        }
    }

    /// Best label sequence for `utt`.
    pub fn decode(&self, utt: &Utterance, lm: Option<(&LstmLm, &ParamStore<f64>)>, cfg: &BeamConfig) -> Result<Vec<usize>> {
        let result = match self {
            Recognizer::Single(sys, store) => {
                let h = sys.encode(store, utt)?;
                let grid = sys.ctc_grid(store, &h)?;
                let mut scorer = DecoderScorer { decoder: &sys.s2s, store, memory: &h };
                joint_beam_search(&grid, &mut scorer, lm, cfg)?
            }
            Recognizer::Concat(sys, store) => {
                let h = sys.encode(store, utt)?;
                let grid = crate::transformer::ctc_decoder_forward(&h, &sys.ctc, store)?;
                let mut scorer = DecoderScorer { decoder: &sys.s2s, store, memory: &h };
                joint_beam_search(&grid, &mut scorer, lm, cfg)?
            }
            Recognizer::Fused(sys, store) => {
                let st = sys.decode_state(store, utt)?;
                let mut scorer = FusedScorer { sys, store, h_a: st.h_a, h_v: st.h_v, xi_a: st.xi_a, xi_v: st.xi_v };
                joint_beam_search(&st.grid, &mut scorer, lm, cfg)?
            }
        };
        Ok(result.labels.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::corpus::{gen_corpus, CorpusConfig};

    fn tiny_cfg() -> (ModelConfig, FusionConfig) {
        let m = ModelConfig { d_att: 8, heads: 2, encoder_blocks: 1, decoder_blocks: 1, ctc_blocks: 0, ff_dim: 16, vocab: 12, dropout: 0.0 };
        let f = FusionConfig { dfn_widths: [8, 8, 4], blstm_layers: 1, blstm_cells: 3, dropout: 0.0, weightnet_hidden: [4, 4] };
        (m, f)
    }

    #[test]
    fn every_mode_decodes_and_fused_outputs_are_normalized() {
        let corpus = gen_corpus(&CorpusConfig { train: 2, dev: 0, test: 1, ..CorpusConfig::default() }).unwrap();
        let (m, f) = tiny_cfg();
        let utt = &corpus.test[0];
        let beam = BeamConfig { beam: 2, theta: 0.0, ..BeamConfig::default() };
        for mode in Mode::ALL {
            let r = Recognizer::build(mode, ParamStore::new(3), &m, &f).unwrap();
            let hyp = r.decode(utt, None, &beam).unwrap();
            assert!(hyp.iter().all(|&t| t != 0 && t != EOS));
            if let Recognizer::Fused(sys, store) = &r {
                let inp = sys.inputs(store, utt).unwrap();
                let mut g = Graph::eval();
                let (c, s) = sys.fused(&mut g, store, &inp);
                assert_eq!(g.value(c).rows(), utt.audio.len() / 4);
                assert_eq!(g.value(s).rows(), utt.labels.len() + 1);
                for v in [c, s] {
                    let t = g.value(v);
                    for r in 0..t.rows() {
                        assert!(crate::scalar::log_sum_exp(t.row(r)).abs() < 1e-9);
                    }
                }
                // Teacher-forced fused rows agree with the incremental scorer.
                let st = sys.decode_state(store, utt).unwrap();
                assert!(st.grid.logp().max_abs_diff(g.value(c)) < 1e-12);
                let mut scorer = FusedScorer { sys, store, h_a: st.h_a, h_v: st.h_v, xi_a: st.xi_a, xi_v: st.xi_v };
                let (input, _) = teacher_forcing(&utt.labels);
                for k in [1, input.len()] {
                    let row = scorer.next_logp(&input[..k]).unwrap();
                    for (a, b) in row.iter().zip(g.value(s).row(k - 1)) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
        assert!("bogus".parse::<Mode>().is_err());
        assert_eq!("stream_weight".parse::<Mode>().unwrap(), Mode::StreamWeight);
    }

    #[test]
    fn alpha_endpoints_select_one_objective() {
        let corpus = gen_corpus(&CorpusConfig { train: 1, dev: 0, test: 1, ..CorpusConfig::default() }).unwrap();
        let (m, _) = tiny_cfg();
        let mut store = ParamStore::new(5);
        let sys = SingleStream::new(&mut store, Modality::Audio, &m).unwrap();
        let utt = &corpus.train[0];
        let grads = |alpha: f64| {
            let mut g = Graph::eval();
            let l = sys.loss(&mut g, &store, utt, alpha).unwrap();
            let mut gr = crate::autodiff::Gradients::new();
            g.backward(l, &mut gr).unwrap();
            (g.value(l).data()[0], gr)
        };
        let (l1, g1) = grads(1.0);
        let (l0, g0) = grads(0.0);
        let (lh, _) = grads(0.5);
        assert!((lh - 0.5 * (l0 + l1)).abs() < 1e-9);
        // Pure CTC leaves the attention decoder without gradient, pure CE the CTC head.
        let s2s_out = store.id("decoder.s2s.a.out.w").unwrap();
        let ctc_out = store.id("decoder.ctc.a.out.w").unwrap();
        assert!(g1.get(s2s_out).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
        assert!(g0.get(ctc_out).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
        let mut g = Graph::eval();
        let x = g.input(stream_input(utt, Modality::Audio).unwrap());
        let x = g.input(sys.front.norm.apply(&store, g.value(x)));
        let h = sys.front.encoder.forward(&mut g, &store, x).0;
        let (c, _) = sys.ctc.forward(&mut g, &store, h);
        let pure = ctc_nll(&mut g, c, &utt.labels, 0).unwrap();
        assert!((g.value(pure).data()[0] - l1).abs() < 1e-12);
    }
}
