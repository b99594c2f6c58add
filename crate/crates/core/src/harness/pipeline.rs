//! File layout of a run directory and the end-to-end experiment.
//!
//! ```text
//! <workdir>/corpus/       generated corpus
//! <workdir>/<phase>.ckpt  ao, vo, lm, av_concat, dfn, stream_weight
//! <workdir>/<phase>.loss.tsv
//! <workdir>/sweep.tsv
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::ExperimentConfig;
use super::corpus::{gen_corpus, load_corpus_config, load_split, write_corpus, Corpus, Split, Utterance};
use super::eval::{run_sweep, SweepResult, SweepSystem};
use super::system::{LanguageModel, Mode, Recognizer};
use super::train::{train_av_concat, train_fusion, train_lm, train_single, Phase, TrainReport, Trained};
use crate::autodiff::{Checkpoint, ParamStore};
use crate::decoding::LstmLm;
use crate::error::{Error, Result};
use crate::streams::Modality;

#[derive(Clone, Debug)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn checkpoint(&self, phase: Phase) -> PathBuf {
        self.root.join(format!("{}.ckpt", phase.artifact()))
    }

    pub fn loss_curve(&self, phase: Phase) -> PathBuf {
        self.root.join(format!("{}.loss.tsv", phase.artifact()))
    }

    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep.tsv")
    }
}

fn load_params(path: &Path) -> Result<ParamStore<f64>> {
    Ok(Checkpoint::<f64>::load(path)?.params)
}

/// Saves the checkpoint and loss curve of a finished phase.
pub fn save_trained(dir: &Workdir, trained: &Trained) -> Result<()> {
    std::fs::create_dir_all(&dir.root)?;
    let r = &trained.report;
    let mut ck = Checkpoint::new(trained.store.clone());
    ck.meta.insert("phase".into(), r.phase.name().into());
    ck.meta.insert("steps".into(), r.steps.to_string());
    ck.save(&dir.checkpoint(r.phase))?;
    let mut curve = format!("# probe loss before {} after {}\nepoch\ttrain_loss\n", r.initial_loss, r.final_loss);
    for (i, l) in r.epoch_losses.iter().enumerate() {
        curve.push_str(&format!("{}\t{l}\n", i + 1));
    }
    std::fs::write(dir.loss_curve(r.phase), curve)?;
    Ok(())
}

/// Trains one phase on `train`, loading prerequisite checkpoints from `dir`.
pub fn train_phase(cfg: &ExperimentConfig, dir: &Workdir, phase: Phase, train: &[Utterance]) -> Result<TrainReport> {
    let prereq = |p: Phase| load_params(&dir.checkpoint(p));
    let trained = match phase {
        Phase::Ao => train_single(cfg, Modality::Audio, train)?,
        Phase::Vo => train_single(cfg, Modality::Video, train)?,
        Phase::Lm => train_lm(cfg, train)?,
        Phase::AvConcat => train_av_concat(cfg, train, &prereq(Phase::Ao)?, &prereq(Phase::Vo)?)?,
        Phase::FusionDfn | Phase::FusionStreamWeight => {
            let mode = phase.mode().expect("fusion phases have a mode");
            train_fusion(cfg, mode, train, &prereq(Phase::Ao)?, &prereq(Phase::Vo)?)?
        }
    };
    save_trained(dir, &trained)?;
    Ok(trained.report)
}

pub fn load_recognizer(cfg: &ExperimentConfig, dir: &Workdir, mode: Mode) -> Result<Recognizer> {
    Recognizer::from_checkpoint(mode, load_params(&dir.checkpoint(Phase::for_mode(mode)))?, &cfg.model, &cfg.fusion)
}

pub fn load_lm(cfg: &ExperimentConfig, path: &Path) -> Result<(LstmLm, ParamStore<f64>)> {
    let store = load_params(path)?;
    let before = store.len();
    let mut s = store;
    let lm = LanguageModel::new(&mut s, &cfg.lm)?.lm;
    if s.len() != before {
        return Err(Error::Format(format!("{} is not a language model checkpoint for this config", path.display())));
    }
    Ok((lm, s))
}

/// The corpus written under `dir`, or [`Error::MissingArtifact`].
pub fn load_corpus_split(dir: &Workdir, split: Split) -> Result<Vec<Utterance>> {
    load_split(&dir.corpus(), split)
}

/// Sweeps every configured mode whose checkpoint loads; the others are marked failed.
/// The LM is used only when `decode.theta > 0`.
pub fn sweep_workdir(cfg: &ExperimentConfig, dir: &Workdir, lm_path: Option<&Path>) -> Result<SweepResult> {
    let corpus_cfg = load_corpus_config(&dir.corpus())?;
    let loaded: Vec<(Mode, Option<Recognizer>)> = cfg.sweep.modes.iter().map(|&m| (m, load_recognizer(cfg, dir, m).ok())).collect();
    let lm = if cfg.decode.theta > 0.0 {
        let default = dir.checkpoint(Phase::Lm);
        Some(load_lm(cfg, lm_path.unwrap_or(&default))?)
    } else {
        None
    };
    let systems: Vec<SweepSystem<'_>> = loaded.iter().map(|(m, r)| SweepSystem { mode: *m, recognizer: r.as_ref() }).collect();
    let result = run_sweep(&corpus_cfg, &systems, lm.as_ref().map(|(l, s)| (l, s)), &cfg.sweep, &cfg.decode)?;
    std::fs::write(dir.sweep(), result.to_tsv())?;
    Ok(result)
}

pub struct PipelineReport {
    pub corpus: Corpus,
    pub reports: Vec<TrainReport>,
    pub sweep: SweepResult,
    /// Wall-clock seconds per stage, in execution order.
    pub timings: Vec<(String, f64)>,
}

/// Corpus generation, every training phase and the sweep, all under `dir`.
pub fn run_pipeline(cfg: &ExperimentConfig, dir: &Workdir, mut log: impl FnMut(&str)) -> Result<PipelineReport> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>, log: &mut dyn FnMut(&str)| {
        let secs = clock.elapsed().as_secs_f64();
        clock = Instant::now();
        log(&format!("{name}: {secs:.1} s"));
        timings.push((name.to_string(), secs));
    };
    let corpus = gen_corpus(&cfg.corpus)?;
    write_corpus(&dir.corpus(), &corpus)?;
    lap("gen-corpus", &mut timings, &mut log);
    let mut reports = Vec::new();
    for phase in Phase::ALL {
        if phase == Phase::Lm && cfg.decode.theta == 0.0 {
            continue;
        }
        let r = train_phase(cfg, dir, phase, &corpus.train)?;
        log(&format!("{phase}: probe loss {:.3} -> {:.3} over {} steps", r.initial_loss, r.final_loss, r.steps));
        reports.push(r);
        lap(phase.name(), &mut timings, &mut log);
    }
    let sweep = sweep_workdir(cfg, dir, None)?;
    lap("sweep", &mut timings, &mut log);
    Ok(PipelineReport { corpus, reports, sweep, timings })
}
