//! Signal-based reliability measures for both streams.
//!
//! Audio rows are `[mfcc1..mfccK, snr_est, f0, df0, pov]` at the audio frame
//! rate; video rows are `[confidence, AU12, AU15, AU17, AU23, AU25, AU26]` at
//! the video frame rate, read from a TSV file.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::streams::{average_pairs, bresenham_align};
use crate::tensor::Tensor;

pub const DEFAULT_MFCC_COUNT: usize = 5;
pub const VIDEO_COLUMNS: [&str; 7] = ["confidence", "AU12", "AU15", "AU17", "AU23", "AU25", "AU26"];
pub const FRAME_SECONDS: f64 = 0.025;
pub const SHIFT_SECONDS: f64 = 0.010;
pub const PRE_EMPHASIS: f64 = 0.97;
pub const MEL_BANDS: usize = 23;
/// Filterbank energies are floored here before the log.
pub const ENERGY_FLOOR: f64 = 1e-10;
/// Unvoiced utterances report this f0 (the bottom of the search range).
pub const F0_MIN: f64 = 50.0;
pub const F0_MAX: f64 = 400.0;
/// Frames whose autocorrelation peak is below this do not update the held f0.
pub const VOICING_THRESHOLD: f64 = 0.5;
pub const SNR_WINDOW: usize = 101;
pub const SNR_PERCENTILE: f64 = 0.10;
pub const SNR_EPS: f64 = 1e-10;
pub const SNR_RANGE: (f64, f64) = (-30.0, 40.0);

pub fn audio_columns(mfcc_count: usize) -> Vec<String> {
    let mut cols: Vec<String> = (1..=mfcc_count).map(|i| format!("mfcc{i}")).collect();
    cols.extend(["snr_est", "f0", "df0", "pov"].map(String::from));
    cols
}

pub fn video_columns() -> Vec<String> {
    VIDEO_COLUMNS.iter().map(|s| s.to_string()).collect()
}

/// Frames of reliability measures with named columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityStream<S> {
    pub frames: Tensor<S>,
    pub columns: Vec<String>,
}

impl<S: Scalar> ReliabilityStream<S> {
    pub fn new(frames: Tensor<S>, columns: Vec<String>) -> Result<Self> {
        if frames.shape().len() != 2 || frames.cols() != columns.len() {
            return Err(Error::shape(
                "ReliabilityStream",
                format!("matrix {:?} vs {} columns", frames.shape(), columns.len()),
            ));
        }
        if frames.rows() == 0 {
            return Err(Error::Empty("ReliabilityStream"));
        }
        Ok(Self { frames, columns })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, name: &str) -> Result<Vec<S>> {
        let j = self.columns.iter().position(|c| c == name).ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        Ok((0..self.len()).map(|r| self.frames.at(r, j)).collect())
    }
}

/// Samples per 25 ms analysis frame.
pub fn frame_len(sample_rate: usize) -> usize {
    (sample_rate as f64 * FRAME_SECONDS).round() as usize
}

pub fn frame_shift_samples(sample_rate: usize) -> usize {
    (sample_rate as f64 * SHIFT_SECONDS).round() as usize
}

/// Number of whole frames in `n` samples (frames never run past the end).
pub fn frame_count(n: usize, sample_rate: usize) -> usize {
    let (len, shift) = (frame_len(sample_rate), frame_shift_samples(sample_rate));
    if n < len {
        0
    } else {
        1 + (n - len) / shift
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Precomputed MFCC front end for one sample rate.
pub struct MfccExtractor {
    sample_rate: usize,
    frame_len: usize,
    n_fft: usize,
    count: usize,
    window: Vec<f64>,
    /// `bands x (n_fft/2 + 1)` triangular weights.
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor").field("sample_rate", &self.sample_rate).field("count", &self.count).finish()
    }
}

/// Triangular mel filters spanning 0 Hz to Nyquist, evaluated on FFT bins.
pub fn mel_filterbank(sample_rate: usize, n_fft: usize, bands: usize) -> Vec<Vec<f64>> {
    let nyq = sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyq));
    let edges: Vec<f64> = (0..bands + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (bands + 1) as f64)).collect();
    let bins = n_fft / 2 + 1;
    (0..bands)
        .map(|b| {
            let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

impl MfccExtractor {
    pub fn new(sample_rate: usize, count: usize) -> Result<Self> {
        let frame_len = frame_len(sample_rate);
        if frame_len < 2 {
            return Err(Error::InvalidArgument(format!("sample rate {sample_rate} too low")));
        }
        if count == 0 || count >= MEL_BANDS {
            return Err(Error::InvalidArgument(format!("mfcc count {count} outside 1..{MEL_BANDS}")));
        }
        let n_fft = frame_len.next_power_of_two();
        let window = (0..frame_len)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (frame_len - 1) as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self { sample_rate, frame_len, n_fft, count, window, filters: mel_filterbank(sample_rate, n_fft, MEL_BANDS), fft })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// Log mel energies of one frame (pre-emphasis, Hamming, |FFT|^2, filterbank).
    pub fn log_mel<S: Scalar>(&self, frame: &[S]) -> Result<Vec<f64>> {
        if frame.len() != self.frame_len {
            return Err(Error::Length(format!(
                "frame has {} samples, {} expected at {} Hz",
                frame.len(),
                self.frame_len,
                self.sample_rate
            )));
        }
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for n in 0..self.frame_len {
            let prev = if n == 0 { frame[0].as_f64() } else { frame[n - 1].as_f64() };
            buf[n].re = (frame[n].as_f64() - PRE_EMPHASIS * prev) * self.window[n];
        }
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..self.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        Ok(self
            .filters
            .iter()
            .map(|w| w.iter().zip(&power).map(|(a, b)| a * b).sum::<f64>().max(ENERGY_FLOOR).ln())
            .collect())
    }

    /// Cepstral coefficients `c1..cK` (orthonormal DCT-II, `c0` dropped).
    pub fn compute<S: Scalar>(&self, frame: &[S]) -> Result<Vec<S>> {
        let logmel = self.log_mel(frame)?;
        let m = logmel.len() as f64;
        let scale = (2.0 / m).sqrt();
        Ok((1..=self.count)
            .map(|k| {
                let c: f64 = logmel
                    .iter()
                    .enumerate()
                    .map(|(j, &e)| e * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / m).cos())
                    .sum();
                S::lit(scale * c)
            })
            .collect())
    }
}

/// First five cepstral coefficients of a 25 ms frame.
pub fn compute_mfcc5<S: Scalar>(frame: &[S], sample_rate: usize) -> Result<Vec<S>> {
    MfccExtractor::new(sample_rate, DEFAULT_MFCC_COUNT)?.compute(frame)
}

/// Per-frame pitch track.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchTrack {
    pub f0: Vec<f64>,
    pub df0: Vec<f64>,
    pub pov: Vec<f64>,
}

/// Normalised cross-correlation pitch tracker.
///
/// Each frame looks at a 50 ms window centred on the frame centre (zero
/// padded at the edges), compares its first `W - max_lag` samples with the
/// lagged copy over the lags for 400..50 Hz, and takes the first local maximum
/// within 90% of the best one, refined by a parabola. `pov` is the clipped
/// peak correlation. Frames below [`VOICING_THRESHOLD`] hold the last voiced
/// f0; frames before the first voiced one take its value.
pub fn estimate_pitch_pov<S: Scalar>(signal: &[S], sample_rate: usize) -> Result<PitchTrack> {
    let n_frames = frame_count(signal.len(), sample_rate);
    if n_frames == 0 {
        return Err(Error::Length(format!("signal of {} samples is shorter than one frame", signal.len())));
    }
    let sr = sample_rate as f64;
    let min_lag = (sr / F0_MAX).floor().max(1.0) as usize;
    let max_lag = (sr / F0_MIN).ceil() as usize;
    let win = ((0.05 * sr).round() as usize).max(max_lag + 3);
    let m = win - max_lag - 1;
    let (flen, shift) = (frame_len(sample_rate), frame_shift_samples(sample_rate));
    let x: Vec<f64> = signal.iter().map(|v| v.as_f64()).collect();
    let sample = |i: isize| if i < 0 || i as usize >= x.len() { 0.0 } else { x[i as usize] };

    let mut raw_f0 = vec![None; n_frames];
    let mut pov = vec![0.0; n_frames];
    let mut nccf = vec![0.0; max_lag + 2];
    for t in 0..n_frames {
        let start = (t * shift + flen / 2) as isize - (win / 2) as isize;
        let w: Vec<f64> = (0..win as isize).map(|i| sample(start + i)).collect();
        let e0: f64 = w[..m].iter().map(|v| v * v).sum();
        for lag in min_lag - 1..=max_lag + 1 {
            let seg = &w[lag..lag + m];
            let el: f64 = seg.iter().map(|v| v * v).sum();
            let cross: f64 = w[..m].iter().zip(seg).map(|(a, b)| a * b).sum();
            let denom = (e0 * el).sqrt();
            nccf[lag] = if denom > 1e-20 { cross / denom } else { 0.0 };
        }
        let best = (min_lag..=max_lag).map(|l| nccf[l]).fold(f64::NEG_INFINITY, f64::max);
        if best <= 0.0 {
            continue;
        }
        let is_peak = |l: usize| nccf[l] >= nccf[l - 1] && nccf[l] >= nccf[l + 1];
        let lag = (min_lag..=max_lag)
            .find(|&l| nccf[l] >= 0.9 * best && is_peak(l))
            .unwrap_or_else(|| (min_lag..=max_lag).find(|&l| nccf[l] == best).unwrap());
        let (a, b, c) = (nccf[lag - 1], nccf[lag], nccf[lag + 1]);
        let denom = a - 2.0 * b + c;
        let delta = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        let peak = b - 0.25 * (a - c) * delta;
        pov[t] = peak.clamp(0.0, 1.0);
        if pov[t] >= VOICING_THRESHOLD {
            raw_f0[t] = Some((sr / (lag as f64 + delta)).clamp(F0_MIN, F0_MAX));
        }
    }
    let first = raw_f0.iter().flatten().next().copied().unwrap_or(F0_MIN);
    let mut held = first;
    let f0: Vec<f64> = raw_f0
        .iter()
        .map(|v| {
            if let Some(v) = v {
                held = *v;
            }
            held
        })
        .collect();
    let df0 = central_difference(&f0);
    Ok(PitchTrack { f0, df0, pov })
}

/// `(x[t+1] - x[t-1]) / 2`, with the neighbours clamped at the ends.
pub fn central_difference(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|t| (x[(t + 1).min(n - 1)] - x[t.saturating_sub(1)]) / 2.0).collect()
}

/// Frame SNR against a running noise floor.
///
/// The floor at `t` is the 10th percentile (lower nearest rank) of the energies
/// in a window of [`SNR_WINDOW`] frames centred on `t`, truncated at the ends.
pub fn estimate_snr_proxy<S: Scalar>(energy: &[S]) -> Result<Vec<S>> {
    if let Some(bad) = energy.iter().find(|e| !(e.as_f64() >= 0.0)) {
        return Err(Error::OutOfRange(format!("frame energy {bad} is negative or NaN")));
    }
    let e: Vec<f64> = energy.iter().map(|v| v.as_f64()).collect();
    let half = SNR_WINDOW / 2;
    let mut window = Vec::with_capacity(SNR_WINDOW);
    Ok((0..e.len())
        .map(|t| {
            window.clear();
            window.extend_from_slice(&e[t.saturating_sub(half)..(t + half + 1).min(e.len())]);
            window.sort_by(f64::total_cmp);
            let floor = window[(SNR_PERCENTILE * (window.len() - 1) as f64).floor() as usize];
            let snr = 10.0 * ((e[t] - floor).max(SNR_EPS) / floor.max(SNR_EPS)).log10();
            S::lit(snr.clamp(SNR_RANGE.0, SNR_RANGE.1))
        })
        .collect())
}

/// Mean square of each analysis frame of the raw signal.
pub fn frame_energies<S: Scalar>(signal: &[S], sample_rate: usize) -> Vec<f64> {
    let (len, shift) = (frame_len(sample_rate), frame_shift_samples(sample_rate));
    (0..frame_count(signal.len(), sample_rate))
        .map(|t| signal[t * shift..t * shift + len].iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / len as f64)
        .collect()
}

/// All audio reliability measures of a waveform, one row per analysis frame.
pub fn extract_audio_reliability<S: Scalar>(signal: &[S], sample_rate: usize, mfcc_count: usize) -> Result<ReliabilityStream<S>> {
    let mfcc = MfccExtractor::new(sample_rate, mfcc_count)?;
    let pitch = estimate_pitch_pov(signal, sample_rate)?;
    let snr = estimate_snr_proxy(&frame_energies(signal, sample_rate))?;
    let n = pitch.f0.len();
    let (len, shift) = (frame_len(sample_rate), frame_shift_samples(sample_rate));
    let width = mfcc_count + 4;
    let mut data = Vec::with_capacity(n * width);
    for t in 0..n {
        data.extend(mfcc.compute::<S>(&signal[t * shift..t * shift + len])?);
        data.extend([S::lit(snr[t].as_f64()), S::lit(pitch.f0[t]), S::lit(pitch.df0[t]), S::lit(pitch.pov[t])]);
    }
    ReliabilityStream::new(Tensor::matrix(n, width, data), audio_columns(mfcc_count))
}

/// Writes the visual reliability TSV: a `frame` column plus [`VIDEO_COLUMNS`].
pub fn write_visual_reliability<S: Scalar>(path: &Path, rel: &ReliabilityStream<S>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path).map_err(csv_err)?;
    let mut header = vec!["frame".to_string()];
    header.extend(rel.columns.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for r in 0..rel.len() {
        let mut rec = vec![r.to_string()];
        rec.extend(rel.frames.row(r).iter().map(|v| format!("{}", v.as_f64())));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(e.to_string())
    }
}

/// Reads a visual reliability TSV. Columns are located by header name and
/// returned in [`VIDEO_COLUMNS`] order; `frame` must count up from 0. With
/// `expected_len`, the row count must equal the owning video stream length.
pub fn load_visual_reliability<S: Scalar>(path: &Path, expected_len: Option<usize>) -> Result<ReliabilityStream<S>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut rd = csv::ReaderBuilder::new().delimiter(b'\t').has_headers(true).from_path(path).map_err(csv_err)?;
    let header = rd.headers().map_err(csv_err)?.clone();
    let find = |name: &str| header.iter().position(|h| h.trim() == name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let frame_col = find("frame")?;
    let cols: Vec<usize> = VIDEO_COLUMNS.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let mut data = Vec::new();
    let mut rows = 0usize;
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let field = |j: usize| rec.get(j).map(str::trim).unwrap_or("");
        let frame: usize =
            field(frame_col).parse().map_err(|_| Error::Schema(format!("row {rows}: bad frame index `{}`", field(frame_col))))?;
        if frame != rows {
            return Err(Error::Schema(format!("row {rows}: frame index {frame} out of sequence")));
        }
        for (k, &j) in cols.iter().enumerate() {
            let v: f64 = field(j)
                .parse()
                .map_err(|_| Error::Schema(format!("row {rows}: bad {} value `{}`", VIDEO_COLUMNS[k], field(j))))?;
            if !v.is_finite() {
                return Err(Error::OutOfRange(format!("row {rows}: {} is not finite", VIDEO_COLUMNS[k])));
            }
            if k == 0 && !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange(format!("row {rows}: confidence {v} outside [0, 1]")));
            }
            data.push(S::lit(v));
        }
        rows += 1;
    }
    if let Some(n) = expected_len {
        if rows != n {
            return Err(Error::Length(format!("visual reliability has {rows} rows, video stream has {n} frames")));
        }
    }
    ReliabilityStream::new(Tensor::matrix(rows, VIDEO_COLUMNS.len(), data), video_columns())
}

/// Brings both reliability streams to the subsampled encoder rate: video
/// rows are first mapped onto the audio frames with [`bresenham_align`], then
/// both are pair-averaged twice (the same length rule as the encoders).
pub fn assemble_reliability<S: Scalar>(
    audio_rel: &ReliabilityStream<S>,
    video_rel: &ReliabilityStream<S>,
    audio_len: usize,
    video_len: usize,
) -> Result<(ReliabilityStream<S>, ReliabilityStream<S>)> {
    if audio_rel.len() != audio_len {
        return Err(Error::Length(format!("audio reliability has {} rows, audio stream {audio_len}", audio_rel.len())));
    }
    if video_rel.len() != video_len {
        return Err(Error::Length(format!("video reliability has {} rows, video stream {video_len}", video_rel.len())));
    }
    if audio_len < 4 {
        return Err(Error::Length(format!("subsampling needs at least 4 frames, got {audio_len}")));
    }
    let map = bresenham_align(video_len, audio_len)?;
    let v = video_rel.frames.gather_rows(&map.map);
    let ra = average_pairs(&average_pairs(&audio_rel.frames));
    let rv = average_pairs(&average_pairs(&v));
    Ok((ReliabilityStream::new(ra, audio_rel.columns.clone())?, ReliabilityStream::new(rv, video_rel.columns.clone())?))
}
