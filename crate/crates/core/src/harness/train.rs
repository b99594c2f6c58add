//! Training phases for the five recognisers and the language model.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::corpus::{mix_seed, Utterance};
use super::system::{reliability_inputs, stream_input, AvConcat, FusedSystem, FusionInputs, LanguageModel, Mode, SingleStream};
use crate::autodiff::{Checkpoint, Graph, Gradients, Optimizer, OptimizerKind, ParamStore, Var};
use crate::error::{Error, Result};
use crate::streams::Modality;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// CTC weight of the joint training objective.
    pub alpha: f64,
    /// Epochs for the single-stream systems.
    pub epochs: usize,
    pub av_epochs: usize,
    pub fusion_epochs: usize,
    pub lm_epochs: usize,
    pub batch: usize,
    pub factor: f64,
    pub fusion_factor: f64,
    pub warmup: usize,
    pub clip: f64,
    /// Utterances whose eval-mode loss is reported before and after a phase.
    pub probe: usize,
    /// Also update the single-stream systems while training a fusion head.
    pub joint_finetune: bool,
    /// Where state is dumped when the loss goes non-finite; the system temp dir if unset.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            alpha: 0.3,
            epochs: 30,
            av_epochs: 8,
            fusion_epochs: 8,
            lm_epochs: 10,
            batch: 16,
            factor: 0.4,
            fusion_factor: 1.0,
            warmup: 120,
            clip: 5.0,
            probe: 48,
            joint_finetune: false,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.warmup == 0 {
            return Err(Error::Config("train.batch and train.warmup must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("train.alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.factor > 0.0 && self.fusion_factor > 0.0 && self.clip > 0.0) {
            return Err(Error::Config("train.factor, train.fusion_factor and train.clip must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Ao,
    Vo,
    AvConcat,
    FusionDfn,
    FusionStreamWeight,
    Lm,
}

impl Phase {
    pub const ALL: [Phase; 6] = [Phase::Ao, Phase::Vo, Phase::Lm, Phase::AvConcat, Phase::FusionDfn, Phase::FusionStreamWeight];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Ao => "ao",
            Phase::Vo => "vo",
            Phase::AvConcat => "av_concat",
            Phase::FusionDfn => "fusion_dfn",
            Phase::FusionStreamWeight => "fusion_stream_weight",
            Phase::Lm => "lm",
        }
    }

    /// File stem of the checkpoint this phase produces.
    pub fn artifact(self) -> &'static str {
        match self {
            Phase::FusionDfn => "dfn",
            Phase::FusionStreamWeight => "stream_weight",
            other => other.name(),
        }
    }

    pub fn mode(self) -> Option<Mode> {
        match self {
            Phase::Ao => Some(Mode::Ao),
            Phase::Vo => Some(Mode::Vo),
            Phase::AvConcat => Some(Mode::AvConcat),
            Phase::FusionDfn => Some(Mode::Dfn),
            Phase::FusionStreamWeight => Some(Mode::StreamWeight),
            Phase::Lm => None,
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Ao => Phase::Ao,
            Mode::Vo => Phase::Vo,
            Mode::AvConcat => Phase::AvConcat,
            Mode::Dfn => Phase::FusionDfn,
            Mode::StreamWeight => Phase::FusionStreamWeight,
        }
    }

    /// Checkpoints that must exist before this phase can start.
    pub fn prerequisites(self) -> &'static [Phase] {
        match self {
            Phase::AvConcat | Phase::FusionDfn | Phase::FusionStreamWeight => &[Phase::Ao, Phase::Vo],
            _ => &[],
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::Config(format!("unknown phase `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub phase: Phase,
    /// Mean eval-mode loss over the probe utterances before the first update.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean training-mode loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

pub struct Trained {
    pub store: ParamStore<f64>,
    pub report: TrainReport,
}

/// Optimiser settings for one run of [`fit`].
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub epochs: usize,
    pub factor: f64,
    pub d_model: usize,
}

/// Minibatch training over `n` items. `loss(g, store, i)` builds the loss
/// of item `i`; gradients are averaged over the batch and clipped.
pub fn fit<F>(store: &mut ParamStore<f64>, n: usize, phase: Phase, sched: Schedule, cfg: &TrainConfig, mut loss: F) -> Result<TrainReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>, usize) -> Result<Var>,
{
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    let probe: Vec<usize> = (0..n.min(cfg.probe.max(1))).collect();
    let probe_loss = |store: &ParamStore<f64>, loss: &mut F| -> Result<f64> {
        let mut total = 0.0;
        for &i in &probe {
            let mut g = Graph::eval();
            let l = loss(&mut g, store, i)?;
            total += g.value(l).data()[0];
        }
        Ok(total / probe.len() as f64)
    };
    let initial_loss = probe_loss(store, &mut loss)?;
    let mut opt = Optimizer::new(OptimizerKind::adam_noam(sched.factor, sched.d_model, cfg.warmup));
    let mut grads = Gradients::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(sched.epochs);
    for epoch in 0..sched.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, phase.tag(), epoch as u64]));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            grads.clear();
            let step = opt.steps_taken() + 1;
            for &i in batch {
                let mut g = Graph::train(mix_seed(&[cfg.seed, phase.tag(), epoch as u64, i as u64]));
                let l = loss(&mut g, store, i)?;
                let v = g.value(l).data()[0];
                if !v.is_finite() {
                    return Err(dump_non_finite(store, phase, step, cfg));
                }
                total += v;
                g.backward(l, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            grads.clip_global_norm(cfg.clip);
            if let Err(e) = opt.step(store, &grads) {
                return Err(match e {
                    Error::NonFiniteGradient(_) => dump_non_finite(store, phase, step, cfg),
                    other => other,
                });
            }
        }
        epoch_losses.push(total / n as f64);
    }
    let final_loss = probe_loss(store, &mut loss)?;
    Ok(TrainReport { phase, initial_loss, final_loss, epoch_losses, steps: opt.steps_taken() })
}

fn dump_non_finite(store: &ParamStore<f64>, phase: Phase, step: usize, cfg: &TrainConfig) -> Error {
    let dir = cfg.dump_dir.clone().unwrap_or_else(std::env::temp_dir);
    let path = dir.join(format!("avfuse-nonfinite-{phase}-step{step}.ckpt"));
    let mut ck = Checkpoint::new(store.clone());
    ck.meta.insert("phase".into(), phase.name().into());
    ck.meta.insert("step".into(), step.to_string());
    let dump = match std::fs::create_dir_all(&dir).map_err(Error::from).and_then(|_| ck.save(&path)) {
        Ok(()) => path.display().to_string(),
        Err(e) => format!("<dump failed: {e}>"),
    };
    Error::NonFiniteLoss { step, dump }
}

fn store_for(cfg: &ExperimentConfig, phase: Phase) -> ParamStore<f64> {
    ParamStore::new(mix_seed(&[cfg.train.seed, phase.tag(), 0x5EED]))
}

pub fn train_single(cfg: &ExperimentConfig, modality: Modality, data: &[Utterance]) -> Result<Trained> {
    let phase = match modality {
        Modality::Audio => Phase::Ao,
        Modality::Video => Phase::Vo,
    };
    let mut store = store_for(cfg, phase);
    let sys = SingleStream::new(&mut store, modality, &cfg.model)?;
    let inputs = data.iter().map(|u| stream_input(u, modality)).collect::<Result<Vec<_>>>()?;
    sys.front.norm.fit(&mut store, &inputs.iter().collect::<Vec<_>>())?;
    let sched = Schedule { epochs: cfg.train.epochs, factor: cfg.train.factor, d_model: cfg.model.d_att };
    let alpha = cfg.train.alpha;
    let report = fit(&mut store, data.len(), phase, sched, &cfg.train, |g, s, i| sys.loss(g, s, &data[i], alpha))?;
    Ok(Trained { store, report })
}

pub fn train_av_concat(cfg: &ExperimentConfig, data: &[Utterance], ao: &ParamStore<f64>, vo: &ParamStore<f64>) -> Result<Trained> {
    let mut store = store_for(cfg, Phase::AvConcat);
    let sys = AvConcat::new(&mut store, &cfg.model)?;
    sys.init_from(&mut store, ao, vo)?;
    let sched = Schedule { epochs: cfg.train.av_epochs, factor: cfg.train.factor, d_model: cfg.model.d_att };
    let alpha = cfg.train.alpha;
    let report = fit(&mut store, data.len(), Phase::AvConcat, sched, &cfg.train, |g, s, i| sys.loss(g, s, &data[i], alpha))?;
    Ok(Trained { store, report })
}

/// Trains a fusion head on top of the single-stream systems. Unless
/// `joint_finetune` is set those stay frozen and their outputs are cached.
pub fn train_fusion(cfg: &ExperimentConfig, mode: Mode, data: &[Utterance], ao: &ParamStore<f64>, vo: &ParamStore<f64>) -> Result<Trained> {
    let phase = Phase::for_mode(mode);
    let mut store = store_for(cfg, phase);
    store.merge(ao);
    store.merge(vo);
    let sys = FusedSystem::new(&mut store, mode, &cfg.model, &cfg.fusion)?;
    let rel = data.iter().map(reliability_inputs).collect::<Result<Vec<_>>>()?;
    sys.rel_a.set_stats(&mut store, &rel.iter().map(|r| &r.0).collect::<Vec<&Tensor<f64>>>())?;
    sys.rel_v.set_stats(&mut store, &rel.iter().map(|r| &r.1).collect::<Vec<&Tensor<f64>>>())?;
    let sched = Schedule { epochs: cfg.train.fusion_epochs, factor: cfg.train.fusion_factor, d_model: cfg.model.d_att };
    let alpha = cfg.train.alpha;
    for p in sys.upstream_prefixes() {
        store.set_trainable(&p, cfg.train.joint_finetune);
    }
    let report = if cfg.train.joint_finetune {
        fit(&mut store, data.len(), phase, sched, &cfg.train, |g, s, i| sys.loss_end_to_end(g, s, &data[i], alpha))?
    } else {
        let cached: Vec<FusionInputs> = data.iter().map(|u| sys.inputs(&store, u)).collect::<Result<_>>()?;
        fit(&mut store, data.len(), phase, sched, &cfg.train, |g, s, i| sys.loss(g, s, &cached[i], &data[i].labels, alpha))?
    };
    for p in sys.upstream_prefixes() {
        store.set_trainable(&p, true);
    }
    Ok(Trained { store, report })
}

pub fn train_lm(cfg: &ExperimentConfig, data: &[Utterance]) -> Result<Trained> {
    let mut store = store_for(cfg, Phase::Lm);
    let lm = LanguageModel::new(&mut store, &cfg.lm)?;
    let sched = Schedule { epochs: cfg.train.lm_epochs, factor: cfg.train.factor, d_model: cfg.lm.units };
    let report = fit(&mut store, data.len(), Phase::Lm, sched, &cfg.train, |g, s, i| Ok(lm.loss(g, s, &data[i].labels)))?;
    Ok(Trained { store, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::corpus::gen_corpus;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::smoke();
        cfg.corpus.train = 24;
        cfg.model.dropout = 0.0;
        cfg
    }

    #[test]
    fn fit_reduces_loss_and_is_deterministic() {
        let mut cfg = small();
        cfg.train.epochs = 4;
        cfg.train.batch = 4;
        let corpus = gen_corpus(&cfg.corpus).unwrap();
        let a = train_single(&cfg, Modality::Audio, &corpus.train).unwrap();
        assert!(a.report.final_loss < 0.8 * a.report.initial_loss, "{:?}", a.report);
        assert_eq!(a.report.steps, 4 * 6);
        let b = train_single(&cfg, Modality::Audio, &corpus.train).unwrap();
        assert_eq!(Checkpoint::new(a.store).to_bytes(), Checkpoint::new(b.store).to_bytes());
    }

    #[test]
    fn fusion_leaves_upstream_untouched_unless_finetuning() {
        let mut cfg = small();
        cfg.corpus.train = 6;
        cfg.train.epochs = 1;
        cfg.train.batch = 3;
        let corpus = gen_corpus(&cfg.corpus).unwrap();
        let ao = train_single(&cfg, Modality::Audio, &corpus.train).unwrap().store;
        let vo = train_single(&cfg, Modality::Video, &corpus.train).unwrap().store;
        let key = "decoder.s2s.a.out.w";
        for (joint, mode) in [(false, Mode::Dfn), (false, Mode::StreamWeight), (true, Mode::Dfn)] {
            cfg.train.joint_finetune = joint;
            let t = train_fusion(&cfg, mode, &corpus.train, &ao, &vo).unwrap();
            let same = t.store.get(key).unwrap().max_abs_diff(ao.get(key).unwrap()) == 0.0;
            assert_eq!(same, !joint, "{mode} joint={joint}");
            assert!(t.report.final_loss.is_finite());
        }
        let av = train_av_concat(&cfg, &corpus.train, &ao, &vo).unwrap();
        assert!(av.store.contains("fusion.concat.proj.w"));
        let lm = train_lm(&cfg, &corpus.train).unwrap();
        assert!(lm.report.final_loss < lm.report.initial_loss);
    }

    #[test]
    fn non_finite_loss_dumps_state() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { dump_dir: Some(dir.path().to_path_buf()), batch: 2, ..TrainConfig::default() };
        let mut store = ParamStore::new(1);
        let w = store.get_or_init("w", &[1, 1], crate::autodiff::Init::Zeros).unwrap();
        let sched = Schedule { epochs: 2, factor: 1.0, d_model: 4 };
        let mut calls = 0;
        let err = fit(&mut store, 4, Phase::Lm, sched, &cfg, |g, s, _| {
            calls += 1;
            let x = g.param(s, w);
            let k = if calls > 5 { f64::NAN } else { 1.0 };
            let total = g.sum(x);
            Ok(g.scale(total, k))
        })
        .unwrap_err();
        match err {
            Error::NonFiniteLoss { dump, .. } => {
                let ck = Checkpoint::<f64>::load(std::path::Path::new(&dump)).unwrap();
                assert_eq!(ck.meta["phase"], "lm");
            }
            other => panic!("unexpected {other}"),
        }
        for p in Phase::ALL {
            assert_eq!(p.name().parse::<Phase>().unwrap(), p);
        }
    }
}
