use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avfuse::harness::config::ExperimentConfig;
use avfuse::harness::corpus::{gen_corpus, load_corpus_config, render_utterance, write_corpus, Condition, NoiseKind, Prototypes, Split, Utterance};
use avfuse::harness::eval::{decode_all, evaluate_wer};
use avfuse::harness::pipeline::{load_corpus_split, load_lm, load_recognizer, sweep_workdir, train_phase, Workdir};
use avfuse::harness::system::Mode;
use avfuse::harness::train::Phase;
use avfuse::streams::CLEAN_SNR;
use avfuse::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "avfuse", version, about = "Audio-visual decision fusion experiments on a synthetic corpus")]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding the corpus, checkpoints and results.
    #[arg(long, global = true, default_value = "avfuse-run")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into <workdir>/corpus.
    GenCorpus,
    /// Train one phase: ao, vo, lm or av_concat (fusion phases via `fuse`).
    Train {
        #[arg(long)]
        phase: String,
    },
    /// Train a fusion head on top of the AO and VO checkpoints.
    Fuse {
        #[arg(long, value_enum, default_value = "dfn")]
        mode: FuseMode,
        /// Also update the single-stream systems.
        #[arg(long)]
        joint_finetune: bool,
    },
    /// Print `id<TAB>hypothesis<TAB>reference` for a split.
    Decode(DecodeArgs),
    /// Decode a split and print its WER [%].
    Eval(DecodeArgs),
    /// Run the SNR sweep and write <workdir>/sweep.tsv.
    Sweep {
        #[command(flatten)]
        search: SearchArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FuseMode {
    Dfn,
    #[value(alias = "stream_weight", alias = "sw")]
    StreamWeight,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ao,
    Vo,
    #[value(alias = "av_concat", alias = "av")]
    AvConcat,
    Dfn,
    #[value(alias = "stream_weight", alias = "sw")]
    StreamWeight,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ao => Mode::Ao,
            ModeArg::Vo => Mode::Vo,
            ModeArg::AvConcat => Mode::AvConcat,
            ModeArg::Dfn => Mode::Dfn,
            ModeArg::StreamWeight => Mode::StreamWeight,
        }
    }
}

#[derive(Args)]
struct SearchArgs {
    /// CTC weight in the joint score.
    #[arg(long)]
    alpha: Option<f64>,
    /// Language model weight; 0 disables the LM.
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
    /// LM checkpoint; defaults to <workdir>/lm.ckpt.
    #[arg(long)]
    lm: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, default_value = "test")]
    split: String,
    /// Re-render the test split with audio noise at this SNR (dB).
    #[arg(long, allow_hyphen_values = true)]
    snr: Option<f64>,
    /// Noise type for `--snr`: m (music) or a (ambient).
    #[arg(long, default_value = "m")]
    noise: String,
    #[command(flatten)]
    search: SearchArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("avfuse: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::MissingArtifact(_) => 3,
                _ => 1,
            })
        }
    }
}

fn apply_search(cfg: &mut ExperimentConfig, s: &SearchArgs) -> avfuse::Result<()> {
    if let Some(a) = s.alpha {
        cfg.decode.alpha = a;
    }
    if let Some(t) = s.theta {
        cfg.decode.theta = t;
    }
    if let Some(b) = s.beam {
        cfg.decode.beam = b;
    }
    cfg.decode.validate()
}

fn run(cli: Cli) -> avfuse::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let dir = Workdir::new(&cli.workdir);
    match cli.command {
        Command::GenCorpus => {
            let corpus = gen_corpus(&cfg.corpus)?;
            write_corpus(&dir.corpus(), &corpus)?;
            eprintln!("wrote {} / {} / {} utterances to {}", corpus.train.len(), corpus.dev.len(), corpus.test.len(), dir.corpus().display());
        }
        Command::Train { phase } => {
            let phase: Phase = phase.parse()?;
            if matches!(phase, Phase::FusionDfn | Phase::FusionStreamWeight) {
                return Err(Error::Config(format!("use `avfuse fuse` for the {phase} phase")));
            }
            train(&cfg, &dir, phase)?;
        }
        Command::Fuse { mode, joint_finetune } => {
            cfg.train.joint_finetune |= joint_finetune;
            let phase = match mode {
                FuseMode::Dfn => Phase::FusionDfn,
                FuseMode::StreamWeight => Phase::FusionStreamWeight,
            };
            train(&cfg, &dir, phase)?;
        }
        Command::Decode(args) => {
            let (utts, hyps) = decode_split(&mut cfg, &dir, &args)?;
            for (u, h) in utts.iter().zip(&hyps) {
                println!("{}\t{h}\t{}", u.id, u.text);
            }
        }
        Command::Eval(args) => {
            let (utts, hyps) = decode_split(&mut cfg, &dir, &args)?;
            let refs: Vec<&str> = utts.iter().map(|u| u.text.as_str()).collect();
            println!("{:.2}", evaluate_wer(&hyps, &refs)?);
        }
        Command::Sweep { search } => {
            apply_search(&mut cfg, &search)?;
            let result = sweep_workdir(&cfg, &dir, search.lm.as_deref())?;
            print!("{}", result.to_tsv());
        }
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig, dir: &Workdir, phase: Phase) -> avfuse::Result<()> {
    for p in phase.prerequisites() {
        let path = dir.checkpoint(*p);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
    }
    let data = load_corpus_split(dir, Split::Train)?;
    let r = train_phase(cfg, dir, phase, &data)?;
    eprintln!("{phase}: probe loss {:.4} -> {:.4} over {} steps", r.initial_loss, r.final_loss, r.steps);
    for (i, l) in r.epoch_losses.iter().enumerate() {
        eprintln!("  epoch {}: {l:.4}", i + 1);
    }
    Ok(())
}

fn decode_split(cfg: &mut ExperimentConfig, dir: &Workdir, args: &DecodeArgs) -> avfuse::Result<(Vec<Utterance>, Vec<String>)> {
    apply_search(cfg, &args.search)?;
    let split: Split = args.split.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let utts = match args.snr {
        None => load_corpus_split(dir, split)?,
        Some(snr) => {
            let noise: NoiseKind = args.noise.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            let corpus = load_corpus_config(&dir.corpus())?;
            let protos = Prototypes::new(&corpus);
            let n = match split {
                Split::Train => corpus.train,
                Split::Dev => corpus.dev,
                Split::Test => corpus.test,
            };
            let cond = if snr.is_finite() { Condition::audio(noise, snr) } else { Condition::audio(noise, CLEAN_SNR) };
            (0..n).map(|i| render_utterance(&corpus, &protos, split, i, &cond)).collect::<avfuse::Result<_>>()?
        }
    };
    let rec = load_recognizer(cfg, dir, args.mode.into())?;
    let lm = if cfg.decode.theta > 0.0 {
        let path = args.search.lm.clone().unwrap_or_else(|| dir.checkpoint(Phase::Lm));
        Some(load_lm(cfg, Path::new(&path))?)
    } else {
        None
    };
    let threads = std::thread::available_parallelism().map_or(1, |t| t.get());
    let hyps = decode_all(&rec, &utts, lm.as_ref().map(|(l, s)| (l, s)), &cfg.decode, threads)?;
    Ok((utts, hyps))
}
