//! Word error rate and the noise sweep over the test split.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::corpus::{render_utterance, Condition, CorpusConfig, NoiseKind, Prototypes, Split, Utterance, VisualCondition};
use super::system::{Mode, Recognizer};
use super::text::{decode, words};
use crate::autodiff::ParamStore;
use crate::decoding::{BeamConfig, LstmLm};
use crate::error::{Error, Result};
use crate::streams::{VisualCorruption, CLEAN_SNR};

/// Word-level Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus WER in percent: total word edits over total reference words.
pub fn evaluate_wer<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Length(format!("{} hypotheses for {} references", hypotheses.len(), references.len())));
    }
    let (mut edits, mut total) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (words(h.as_ref()), words(r.as_ref()));
        edits += edit_distance(&h, &r);
        total += r.len();
    }
    if total == 0 {
        return Err(Error::Empty("reference corpus"));
    }
    Ok(100.0 * edits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Audio SNRs in dB, one column each.
    pub snrs: Vec<f64>,
    pub clean: bool,
    /// Extra column with reverberant, noise-free audio; not part of `avg.`.
    pub reverb: bool,
    pub noises: Vec<NoiseKind>,
    /// Visual conditions: `vc` (clean), `gb` (blur), `sp` (salt and pepper).
    pub visual: Vec<String>,
    pub visual_strength: f64,
    pub modes: Vec<Mode>,
    /// Decode only the first `n` test utterances.
    pub utterances: Option<usize>,
    /// Decoding threads; 0 uses every available core.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            snrs: (-4..=4).map(|k| 3.0 * k as f64).collect(),
            clean: true,
            reverb: false,
            noises: vec![NoiseKind::Music],
            visual: vec!["vc".into()],
            visual_strength: 0.6,
            modes: Mode::ALL.to_vec(),
            utterances: None,
            threads: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snrs.is_empty() && !self.clean {
            return Err(Error::Config("sweep needs at least one SNR or the clean column".into()));
        }
        if self.snrs.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("sweep SNRs must be finite; use `clean` for the noise-free column".into()));
        }
        if self.noises.is_empty() || self.visual.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("sweep.noises, sweep.visual and sweep.modes must be non-empty".into()));
        }
        for v in &self.visual {
            parse_visual(v, self.visual_strength)?;
        }
        Ok(())
    }

    /// Column names, averaged ones first.
    fn columns(&self) -> (Vec<String>, usize) {
        let mut cols: Vec<String> = self.snrs.iter().map(|s| fmt_snr(*s)).collect();
        if self.clean {
            cols.push("clean".into());
        }
        let averaged = cols.len();
        if self.reverb {
            cols.push("reverb".into());
        }
        (cols, averaged)
    }

    fn column_audio(&self, col: usize) -> (f64, bool) {
        if col < self.snrs.len() {
            (self.snrs[col], false)
        } else if self.clean && col == self.snrs.len() {
            (CLEAN_SNR, false)
        } else {
            (CLEAN_SNR, true)
        }
    }
}

fn fmt_snr(s: f64) -> String {
    if s.fract() == 0.0 {
        format!("{}", s as i64)
    } else {
        format!("{s}")
    }
}

fn parse_visual(tag: &str, strength: f64) -> Result<Option<VisualCondition>> {
    match tag {
        "vc" => Ok(None),
        other => {
            let kind: VisualCorruption = other.parse().map_err(|_| Error::Config(format!("unknown visual condition `{other}`")))?;
            Ok(Some(VisualCondition { kind, strength }))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// Mode and condition, e.g. `DFN(m.vc)`.
    pub label: String,
    /// WER [%] per column; `None` marks a failed cell.
    pub cells: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub columns: Vec<String>,
    /// The first `averaged` columns make up `avg.`.
    pub averaged: usize,
    pub rows: Vec<SweepRow>,
}

const AVG: &str = "avg.";

impl SweepResult {
    pub fn row(&self, label: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Arithmetic mean of the averaged cells; `None` if any failed.
    pub fn average(&self, row: &SweepRow) -> Option<f64> {
        let cells: Option<Vec<f64>> = row.cells[..self.averaged].iter().copied().collect();
        let cells = cells?;
        (!cells.is_empty()).then(|| cells.iter().sum::<f64>() / cells.len() as f64)
    }

    pub fn averaging_rule(&self) -> String {
        format!("# {AVG} = arithmetic mean of the {} columns {}; WER [%]", self.averaged, self.columns[..self.averaged].join(" "))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = self.averaging_rule();
        out.push('\n');
        let mut header = vec!["model".to_string()];
        header.extend(self.columns[..self.averaged].iter().cloned());
        header.push(AVG.into());
        header.extend(self.columns[self.averaged..].iter().cloned());
        out.push_str(&header.join("\t"));
        out.push('\n');
        let cell = |c: Option<f64>| c.map_or_else(|| "failed".to_string(), |v| format!("{v}"));
        for r in &self.rows {
            let mut line = r.label.clone();
            let avg = std::iter::once(self.average(r));
            for c in r.cells[..self.averaged].iter().copied().chain(avg).chain(r.cells[self.averaged..].iter().copied()) {
                let _ = write!(line, "\t{}", cell(c));
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or(Error::Empty("sweep TSV"))?.split('\t').collect();
        if header.first() != Some(&"model") {
            return Err(Error::MissingColumn("model".into()));
        }
        let avg_at = header.iter().position(|h| *h == AVG).ok_or_else(|| Error::MissingColumn(AVG.into()))?;
        let columns: Vec<String> = header[1..].iter().filter(|h| **h != AVG).map(|h| h.to_string()).collect();
        let averaged = avg_at - 1;
        let mut result = SweepResult { columns, averaged, rows: Vec::new() };
        for line in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != header.len() {
                return Err(Error::Format(format!("sweep row has {} fields, header {}", fields.len(), header.len())));
            }
            let parse = |f: &str| -> Result<Option<f64>> {
                if f == "failed" {
                    return Ok(None);
                }
                let v: f64 = f.parse().map_err(|_| Error::Format(format!("bad WER cell `{f}`")))?;
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::OutOfRange(format!("WER {v}")));
                }
                Ok(Some(v))
            };
            let mut cells = Vec::with_capacity(fields.len() - 2);
            for (i, f) in fields.iter().enumerate().skip(1) {
                if i != avg_at {
                    cells.push(parse(f)?);
                }
            }
            let row = SweepRow { label: fields[0].to_string(), cells };
            if parse(fields[avg_at])? != result.average(&row) {
                return Err(Error::Format(format!("`{}`: {AVG} cell disagrees with its row", row.label)));
            }
            result.rows.push(row);
        }
        Ok(result)
    }
}

/// One recogniser to sweep; `None` when its checkpoint could not be loaded.
pub struct SweepSystem<'a> {
    pub mode: Mode,
    pub recognizer: Option<&'a Recognizer>,
}

struct CellJob {
    cond: Condition,
    targets: Vec<(usize, Vec<usize>)>,
}

/// Decodes the test split of `corpus` under every sweep condition.
pub fn run_sweep(
    corpus: &CorpusConfig,
    systems: &[SweepSystem<'_>],
    lm: Option<(&LstmLm, &ParamStore<f64>)>,
    cfg: &SweepConfig,
    beam: &BeamConfig,
) -> Result<SweepResult> {
    cfg.validate()?;
    beam.validate()?;
    let (columns, averaged) = cfg.columns();
    let mut rows = Vec::new();
    let mut jobs: Vec<CellJob> = Vec::new();
    let mut add = |cond: Condition, row: usize, cols: Vec<usize>| {
        let cond = if cond.snr_db.is_finite() { cond } else { Condition { noise: NoiseKind::Ambient, ..cond } };
        match jobs.iter_mut().find(|j| j.cond == cond) {
            Some(j) => j.targets.push((row, cols)),
            None => jobs.push(CellJob { cond, targets: vec![(row, cols)] }),
        }
    };
    for mode in &cfg.modes {
        let Some(sys) = systems.iter().find(|s| s.mode == *mode) else {
            return Err(Error::Config(format!("sweep mode {mode} has no system")));
        };
        let noises: Vec<Option<NoiseKind>> = if mode.uses_audio() { cfg.noises.iter().copied().map(Some).collect() } else { vec![None] };
        let visuals: Vec<Option<&String>> = if mode.uses_video() { cfg.visual.iter().map(Some).collect() } else { vec![None] };
        for noise in &noises {
            for vis in &visuals {
                let tag = [noise.map(|n| n.to_string()), vis.map(|v| v.to_string())].into_iter().flatten().collect::<Vec<_>>().join(".");
                let row = rows.len();
                rows.push(SweepRow { label: format!("{}({tag})", mode.table_name()), cells: vec![None; columns.len()] });
                if sys.recognizer.is_none() {
                    continue;
                }
                let visual = vis.map(|v| parse_visual(v, cfg.visual_strength)).transpose()?.flatten();
                match noise {
                    Some(n) => {
                        for col in 0..columns.len() {
                            let (snr_db, reverb) = cfg.column_audio(col);
                            add(Condition { noise: *n, snr_db, visual, reverb }, row, vec![col]);
                        }
                    }
                    None => add(Condition { visual, ..Condition::clean() }, row, (0..columns.len()).collect()),
                }
            }
        }
    }
    let protos = Prototypes::new(corpus);
    let n = cfg.utterances.map_or(corpus.test, |k| k.min(corpus.test));
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |t| t.get()),
        t => t,
    };
    let row_mode: Vec<Mode> = cfg
        .modes
        .iter()
        .flat_map(|m| {
            let k = if m.uses_audio() { cfg.noises.len() } else { 1 } * if m.uses_video() { cfg.visual.len() } else { 1 };
            std::iter::repeat_n(*m, k)
        })
        .collect();
    for job in &jobs {
        let utts: Vec<Utterance> = (0..n).map(|i| render_utterance(corpus, &protos, Split::Test, i, &job.cond)).collect::<Result<_>>()?;
        let refs: Vec<&str> = utts.iter().map(|u| u.text.as_str()).collect();
        for (row, cols) in &job.targets {
            let rec = systems.iter().find(|s| s.mode == row_mode[*row]).and_then(|s| s.recognizer).expect("only loaded systems get jobs");
            let wer = decode_all(rec, &utts, lm, beam, threads).and_then(|hyps| evaluate_wer(&hyps, &refs)).ok();
            for &c in cols {
                rows[*row].cells[c] = wer;
            }
        }
    }
    Ok(SweepResult { columns, averaged, rows })
}

/// Transcripts for `utts`, split over `threads` workers in input order.
pub fn decode_all(
    rec: &Recognizer,
    utts: &[Utterance],
    lm: Option<(&LstmLm, &ParamStore<f64>)>,
    beam: &BeamConfig,
    threads: usize,
) -> Result<Vec<String>> {
    let one = |u: &Utterance| rec.decode(u, lm, beam).map(|ids| decode(&ids));
    if threads <= 1 || utts.len() <= 1 {
        return utts.iter().map(one).collect();
    }
    let chunk = utts.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = utts.chunks(chunk).map(|c| s.spawn(move || c.iter().map(one).collect::<Result<Vec<_>>>())).collect();
        let mut out = Vec::with_capacity(utts.len());
        for h in handles {
            out.extend(h.join().expect("decoder thread panicked")?);
        }
        Ok(out)
    })
}
