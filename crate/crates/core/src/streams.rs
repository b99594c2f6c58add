//! Per-modality feature streams, cross-rate index maps, the 4x temporal
//! subsampling block and the signal corruption used for augmentation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::Reader;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SNR sentinel for the clean condition.
pub const CLEAN_SNR: f64 = f64::INFINITY;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Video,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "video" => Ok(Modality::Video),
            other => Err(Error::Format(format!("unknown modality `{other}`"))),
        }
    }
}

/// `N x d` frames of one modality at a fixed frame shift (seconds).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStream<S> {
    frames: Tensor<S>,
    frame_shift: f64,
    modality: Modality,
}

impl<S: Scalar> FeatureStream<S> {
    pub fn new(frames: Tensor<S>, frame_shift: f64, modality: Modality) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(Error::shape("FeatureStream", format!("expected a matrix, got {:?}", frames.shape())));
        }
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::Empty("FeatureStream"));
        }
        if !(frame_shift > 0.0 && frame_shift.is_finite()) {
            return Err(Error::InvalidArgument(format!("frame shift must be positive, got {frame_shift}")));
        }
        Ok(Self { frames, frame_shift, modality })
    }

    pub fn frames(&self) -> &Tensor<S> {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor<S> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame_shift(&self) -> f64 {
        self.frame_shift
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Resamples to `len` frames with [`bresenham_align`]; the frame shift is
    /// rescaled so the stream keeps its duration.
    pub fn align_to(&self, len: usize) -> Result<Self> {
        let map = bresenham_align(self.len(), len)?;
        let frames = self.frames.gather_rows(&map.map);
        let shift = self.frame_shift * self.len() as f64 / len as f64;
        Self::new(frames, shift, self.modality)
    }

    pub fn to_file(&self) -> FeatureFile<S> {
        let mut meta = BTreeMap::new();
        meta.insert("frame_shift".to_string(), format!("{}", self.frame_shift));
        meta.insert("modality".to_string(), self.modality.to_string());
        FeatureFile { meta, data: self.frames.clone() }
    }

    pub fn from_file(file: FeatureFile<S>) -> Result<Self> {
        let shift = file.require("frame_shift")?;
        let shift: f64 = shift.parse().map_err(|_| Error::Format(format!("bad frame_shift `{shift}`")))?;
        let modality = file.require("modality")?.parse()?;
        Self::new(file.data, shift, modality)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(FeatureFile::load(path)?)
    }
}

/// Source index for every destination frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    pub src_len: usize,
    pub dst_len: usize,
    pub map: Vec<usize>,
}

/// Integer line rasterisation from destination frames onto source frames.
///
/// Upsampling (`dst >= src`) steps the error term of the line with slope
/// `src/dst`, so source frame `k` covers destination frames
/// `[ceil(k dst/src), ceil((k+1) dst/src))` and an exact `k`-fold rate ratio
/// repeats every source frame `k` times. Downsampling pins both endpoints and
/// rounds `i (src-1)/(dst-1)` half up. A single destination frame maps to
/// source frame 0.
pub fn bresenham_align(src_len: usize, dst_len: usize) -> Result<IndexMap> {
    if src_len == 0 || dst_len == 0 {
        return Err(Error::InvalidArgument(format!("bresenham_align({src_len}, {dst_len}): lengths must be >= 1")));
    }
    let mut map = Vec::with_capacity(dst_len);
    if dst_len >= src_len {
        let (mut y, mut err) = (0usize, 0usize);
        for _ in 0..dst_len {
            map.push(y);
            err += src_len;
            if err >= dst_len {
                err -= dst_len;
                y += 1;
            }
        }
    } else if dst_len == 1 {
        map.push(0);
    } else {
        let (dy, dx) = ((src_len - 1) as i64, (dst_len - 1) as i64);
        // err = i dy - y dx; y advances while the remainder reaches one half.
        let (mut y, mut err) = (0usize, 0i64);
        for _ in 0..dst_len {
            map.push(y);
            err += dy;
            while 2 * err >= dx {
                err -= dx;
                y += 1;
            }
        }
    }
    Ok(IndexMap { src_len, dst_len, map })
}

/// Output length of two stride-2 stages.
pub fn subsampled_len(n: usize) -> usize {
    n / 2 / 2
}

fn pair_rows<S: Scalar>(g: &mut Graph<S>, x: Var) -> Var {
    let half = g.shape(x).0 / 2;
    let even: Vec<usize> = (0..half).map(|i| 2 * i).collect();
    let odd: Vec<usize> = (0..half).map(|i| 2 * i + 1).collect();
    let a = g.gather_rows(x, &even);
    let b = g.gather_rows(x, &odd);
    g.concat_cols(&[a, b])
}

/// Learned 4x subsampling: two stages of kernel-2 stride-2 convolution along
/// time (adjacent frame pairs stacked, then a linear map), each with ReLU.
/// A trailing odd frame at either stage is dropped.
#[derive(Clone, Copy, Debug)]
pub struct Subsample4 {
    pub conv1: Linear,
    pub conv2: Linear,
}

impl Subsample4 {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            conv1: Linear::new(store, &format!("{name}.conv1"), 2 * d_in, d_out)?,
            conv2: Linear::new(store, &format!("{name}.conv2"), 2 * d_out, d_out)?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.conv1.d_in / 2
    }

    pub fn d_out(&self) -> usize {
        self.conv2.d_out
    }

    /// Graph form; `x` must have at least 4 rows (checked by callers).
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let h = pair_rows(g, x);
        let h = self.conv1.forward(g, store, h);
        let h = g.relu(h);
        let h = pair_rows(g, h);
        let h = self.conv2.forward(g, store, h);
        g.relu(h)
    }
}

fn check_subsample_len(n: usize) -> Result<()> {
    if n < 4 {
        return Err(Error::Length(format!("subsampling needs at least 4 frames, got {n}")));
    }
    Ok(())
}

/// Applies the learned block to a whole stream.
pub fn subsample4<S: Scalar>(stream: &FeatureStream<S>, block: &Subsample4, store: &ParamStore<S>) -> Result<FeatureStream<S>> {
    check_subsample_len(stream.len())?;
    if stream.dim() != block.d_in() {
        return Err(Error::shape("subsample4", format!("stream width {} vs block input {}", stream.dim(), block.d_in())));
    }
    let mut g = Graph::eval();
    let x = g.input(stream.frames.clone());
    let y = block.forward(&mut g, store, x);
    FeatureStream::new(g.take_value(y), stream.frame_shift * 4.0, stream.modality)
}

/// Fixed 4x subsampling that averages adjacent frame pairs twice.
pub fn subsample4_average<S: Scalar>(stream: &FeatureStream<S>) -> Result<FeatureStream<S>> {
    check_subsample_len(stream.len())?;
    let frames = average_pairs(&average_pairs(&stream.frames));
    FeatureStream::new(frames, stream.frame_shift * 4.0, stream.modality)
}

/// Averages rows `2i` and `2i+1`, dropping a trailing odd row.
pub fn average_pairs<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, d) = (x.rows() / 2, x.cols());
    let half = S::lit(0.5);
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        out.extend(x.row(2 * i).iter().zip(x.row(2 * i + 1)).map(|(&a, &b)| half * (a + b)));
    }
    Tensor::matrix(n, d, out)
}

pub fn signal_power<S: Scalar>(x: &[S]) -> S {
    if x.is_empty() {
        return S::zero();
    }
    x.iter().map(|&v| v * v).sum::<S>() / S::from_usize_lossy(x.len())
}

/// Adds a random `clean.len()` segment of `noise`, scaled so that the
/// clean-to-noise power ratio is `snr_db`. [`CLEAN_SNR`] returns `clean`.
pub fn mix_noise_at_snr<S: Scalar>(clean: &[S], noise: &[S], snr_db: f64, seed: u64) -> Result<Vec<S>> {
    if snr_db == CLEAN_SNR {
        return Ok(clean.to_vec());
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument(format!("snr_db must be finite or the clean sentinel, got {snr_db}")));
    }
    if noise.len() < clean.len() {
        return Err(Error::Length(format!("noise has {} samples, clean has {}", noise.len(), clean.len())));
    }
    let pc = signal_power(clean).as_f64();
    if pc <= 0.0 {
        return Err(Error::InvalidArgument("clean signal has zero power".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.gen_range(0..=noise.len() - clean.len());
    let seg = &noise[offset..offset + clean.len()];
    let pn = signal_power(seg).as_f64();
    if pn <= 0.0 {
        return Err(Error::InvalidArgument("noise segment has zero power".into()));
    }
    let gain = S::lit((pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt());
    Ok(clean.iter().zip(seg).map(|(&c, &n)| c + gain * n).collect())
}

/// Linear convolution with `impulse`, truncated to the input length.
pub fn apply_reverb<S: Scalar>(signal: &[S], impulse: &[S]) -> Result<Vec<S>> {
    if impulse.is_empty() {
        return Err(Error::Empty("apply_reverb impulse"));
    }
    let mut out = vec![S::zero(); signal.len()];
    for (n, o) in out.iter_mut().enumerate() {
        let kmax = impulse.len().min(n + 1);
        *o = (0..kmax).map(|k| impulse[k] * signal[n - k]).sum();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VisualCorruption {
    /// Smoothing along the feature axis with standard deviation `strength * 2` bins.
    GaussianBlur,
    /// Each entry replaced by the stream minimum or maximum with probability `strength/2` each.
    SaltPepper,
}

impl fmt::Display for VisualCorruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VisualCorruption::GaussianBlur => "gb",
            VisualCorruption::SaltPepper => "sp",
        })
    }
}

impl FromStr for VisualCorruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gb" => Ok(VisualCorruption::GaussianBlur),
            "sp" => Ok(VisualCorruption::SaltPepper),
            other => Err(Error::InvalidArgument(format!("unknown visual corruption `{other}`"))),
        }
    }
}

/// Width (in feature bins) of the blur kernel at strength 1.
pub const BLUR_SIGMA_PER_STRENGTH: f64 = 2.0;

pub fn visual_corrupt<S: Scalar>(
    stream: &FeatureStream<S>,
    kind: VisualCorruption,
    strength: f64,
    seed: u64,
) -> Result<FeatureStream<S>> {
    if stream.modality != Modality::Video {
        return Err(Error::InvalidArgument("visual_corrupt needs a video stream".into()));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::OutOfRange(format!("corruption strength {strength} outside [0, 1]")));
    }
    if strength == 0.0 {
        return Ok(stream.clone());
    }
    let frames = match kind {
        VisualCorruption::GaussianBlur => blur_rows(&stream.frames, strength * BLUR_SIGMA_PER_STRENGTH),
        VisualCorruption::SaltPepper => salt_pepper(&stream.frames, strength, seed),
    };
    FeatureStream::new(frames, stream.frame_shift, stream.modality)
}

fn blur_rows<S: Scalar>(x: &Tensor<S>, sigma: f64) -> Tensor<S> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let d = x.cols() as isize;
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let row = x.row(r);
        for j in 0..d {
            // Edge bins replicate, so every output keeps the full kernel mass.
            let mut acc = 0.0;
            let mut mass = 0.0;
            for (ki, &w) in kernel.iter().enumerate() {
                let src = (j + ki as isize - radius).clamp(0, d - 1) as usize;
                acc += w * row[src].as_f64();
                mass += w;
            }
            out.set(r, j as usize, S::lit(acc / mass));
        }
    }
    out
}

fn salt_pepper<S: Scalar>(x: &Tensor<S>, strength: f64, seed: u64) -> Tensor<S> {
    let lo = x.data().iter().copied().fold(S::infinity(), S::min);
    let hi = x.data().iter().copied().fold(S::neg_infinity(), S::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for v in out.data_mut() {
        let u: f64 = rng.gen();
        if u < strength / 2.0 {
            *v = lo;
        } else if u < strength {
            *v = hi;
        }
    }
    out
}

pub const FEATURE_MAGIC: &[u8; 8] = b"AVFFEAT\0";

/// A matrix plus a `key=value` text header.
///
/// ```text
/// magic   8 bytes  "AVFFEAT\0"
/// header  u32 length + UTF-8 text, one `key=value` per line
/// rows    u64
/// cols    u64
/// payload rows x cols f64, little-endian, row-major
/// ```
///
/// Feature streams store `frame_shift` and `modality`; posterior grids and
/// reliability caches use the same container with their own keys.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile<S> {
    pub meta: BTreeMap<String, String>,
    pub data: Tensor<S>,
}

impl<S: Scalar> FeatureFile<S> {
    pub fn new(data: Tensor<S>) -> Self {
        Self { meta: BTreeMap::new(), data }
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Format(format!("header lacks `{key}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("header entry `{k}` cannot be encoded")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        let mut out = Vec::with_capacity(32 + header.len() + 8 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.data.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.data.cols() as u64).to_le_bytes());
        for &v in self.data.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != FEATURE_MAGIC {
            return Err(Error::Format("not a feature file (bad magic)".into()));
        }
        let header = r.string()?;
        let mut meta = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("bad header line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Format("matrix extents overflow".into()))?;
        let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("matrix extents overflow".into()))?)?;
        let data = payload.chunks_exact(8).map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect();
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after feature matrix".into()));
        }
        Ok(Self { meta, data: Tensor::matrix(rows, cols, data) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(map: &IndexMap) -> Vec<usize> {
        let mut c = vec![0; map.src_len];
        for &i in &map.map {
            c[i] += 1;
        }
        c
    }

    #[test]
    fn bresenham_examples() {
        assert_eq!(bresenham_align(4, 4).unwrap().map, vec![0, 1, 2, 3]);
        assert_eq!(bresenham_align(2, 4).unwrap().map, vec![0, 0, 1, 1]);
        let m = bresenham_align(3, 7).unwrap();
        assert_eq!(m.map, vec![0, 0, 0, 1, 1, 2, 2]);
        let zeros = counts(&m)[0];
        assert!(zeros == 2 || zeros == 3);
        assert!(bresenham_align(0, 3).is_err());
        assert!(bresenham_align(3, 0).is_err());
    }

    #[test]
    fn bresenham_multiples_repeat_exactly() {
        for src in 1..12 {
            for k in 1..6 {
                let m = bresenham_align(src, k * src).unwrap();
                assert!(counts(&m).iter().all(|&c| c == k), "src {src} k {k}: {:?}", m.map);
            }
        }
    }

    #[test]
    fn bresenham_downsampling_pins_endpoints() {
        let m = bresenham_align(10, 4).unwrap();
        // Oracle: round-half-up of i * 9 / 3.
        assert_eq!(m.map, vec![0, 3, 6, 9]);
        let m = bresenham_align(7, 3).unwrap();
        assert_eq!(m.map, vec![0, 3, 6]);
        let m = bresenham_align(5, 2).unwrap();
        assert_eq!(m.map, vec![0, 4]);
        assert_eq!(bresenham_align(5, 1).unwrap().map, vec![0]);
    }

    #[test]
    fn bresenham_matches_real_arithmetic_line() {
        for src in 1..20usize {
            for dst in 1..45usize {
                let m = bresenham_align(src, dst).unwrap();
                for (i, &y) in m.map.iter().enumerate() {
                    let expect = if dst >= src {
                        (i * src) / dst
                    } else if dst == 1 {
                        0
                    } else {
                        ((i * (src - 1)) as f64 / (dst - 1) as f64 + 0.5).floor() as usize
                    };
                    assert_eq!(y, expect, "({src},{dst}) at {i}");
                }
            }
        }
    }

    fn stream(n: usize, d: usize) -> FeatureStream<f64> {
        let data = (0..n * d).map(|i| (i as f64 * 0.37).sin()).collect();
        FeatureStream::new(Tensor::matrix(n, d, data), 0.01, Modality::Audio).unwrap()
    }

    #[test]
    fn subsample_lengths() {
        for (n, want) in [(100, 25), (4, 1), (103, 25), (8, 2), (7, 1)] {
            let s = subsample4_average(&stream(n, 3)).unwrap();
            assert_eq!(s.len(), want, "N={n}");
            assert_eq!(subsampled_len(n), want);
            assert!((s.frame_shift() - 0.04).abs() < 1e-15);
        }
        assert!(matches!(subsample4_average(&stream(3, 2)), Err(Error::Length(_))));

        let mut store = ParamStore::<f64>::new(1);
        let block = Subsample4::new(&mut store, "sub", 3, 8).unwrap();
        let s = subsample4(&stream(103, 3), &block, &store).unwrap();
        assert_eq!((s.len(), s.dim()), (25, 8));
        assert!(subsample4(&stream(3, 3), &block, &store).is_err());
        assert!(subsample4(&stream(8, 2), &block, &store).is_err());
    }

    #[test]
    fn subsample_average_values() {
        let s = stream(9, 2);
        let out = subsample4_average(&s).unwrap();
        let f = s.frames();
        for i in 0..2 {
            for j in 0..2 {
                let want = (f.at(4 * i, j) + f.at(4 * i + 1, j) + f.at(4 * i + 2, j) + f.at(4 * i + 3, j)) / 4.0;
                assert!((out.frames().at(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn subsample_gradients() {
        let mut store = ParamStore::<f64>::new(9);
        let block = Subsample4::new(&mut store, "sub", 2, 3).unwrap();
        let x = stream(9, 2).into_frames().map(|v| 3.0 * v);
        let report = crate::autodiff::gradcheck::check_gradients(&store, 1e-4, 10, |g, s| {
            let xv = g.input(x.clone());
            let y = block.forward(g, s, xv);
            let y = g.tanh(y);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    fn tone(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * f).sin() + 0.1).collect()
    }

    fn snr_of(clean: &[f64], mixed: &[f64]) -> f64 {
        let noise: Vec<f64> = mixed.iter().zip(clean).map(|(m, c)| m - c).collect();
        10.0 * (signal_power(clean) / signal_power(&noise)).log10()
    }

    #[test]
    fn mixing_hits_target_snr() {
        let clean = tone(800, 0.05);
        let noise: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            (0..2000).map(|_| rng.gen::<f64>() - 0.5).collect()
        };
        for snr in [0.0, -6.0, 9.0, -12.0] {
            let mixed = mix_noise_at_snr(&clean, &noise, snr, 11).unwrap();
            assert!((snr_of(&clean, &mixed) - snr).abs() < 0.01, "snr {snr}");
        }
        assert_eq!(mix_noise_at_snr(&clean, &noise, CLEAN_SNR, 0).unwrap(), clean);
        assert_eq!(
            mix_noise_at_snr(&clean, &noise, -3.0, 5).unwrap(),
            mix_noise_at_snr(&clean, &noise, -3.0, 5).unwrap()
        );
        assert!(mix_noise_at_snr(&vec![0.0; 10], &noise, 0.0, 0).is_err());
        assert!(mix_noise_at_snr(&clean, &noise[..10], 0.0, 0).is_err());
    }

    #[test]
    fn reverb_matches_direct_sum() {
        assert_eq!(apply_reverb(&[1.0, 2.0, 3.0], &[1.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(apply_reverb(&[1.0, 2.0, 3.0], &[0.0, 1.0]).unwrap(), vec![0.0, 1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..200).map(|_| rng.gen::<f64>() - 0.5).collect();
        let h: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() - 0.5).collect();
        let y = apply_reverb(&x, &h).unwrap();
        for n in 0..x.len() {
            let mut want = 0.0;
            for (m, &xm) in x.iter().enumerate().take(n + 1) {
                if n - m < h.len() {
                    want += xm * h[n - m];
                }
            }
            assert!((y[n] - want).abs() <= 1e-12);
        }
        assert!(apply_reverb(&x, &[]).is_err());
    }

    fn video(n: usize, d: usize) -> FeatureStream<f64> {
        let data = (0..n * d).map(|i| (i as f64 * 0.37).sin()).collect();
        FeatureStream::new(Tensor::matrix(n, d, data), 0.04, Modality::Video).unwrap()
    }

    #[test]
    fn salt_pepper_rates() {
        let v = video(625, 16);
        assert_eq!(visual_corrupt(&v, VisualCorruption::SaltPepper, 0.0, 1).unwrap(), v);
        let lo = v.frames().data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.frames().data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let all = visual_corrupt(&v, VisualCorruption::SaltPepper, 1.0, 1).unwrap();
        assert!(all.frames().data().iter().all(|&x| x == lo || x == hi));

        let out = visual_corrupt(&v, VisualCorruption::SaltPepper, 0.1, 4).unwrap();
        let n = v.frames().len() as f64;
        // Only the two extreme entries can be replaced without changing.
        let changed = out.frames().data().iter().zip(v.frames().data()).filter(|(a, b)| a != b).count() as f64;
        let sigma = (n * 0.1 * 0.9).sqrt();
        assert!((changed - 0.1 * n).abs() < 3.0 * sigma + 2.0, "changed {changed}");
        assert!(visual_corrupt(&v, VisualCorruption::SaltPepper, 1.5, 0).is_err());
        assert!(visual_corrupt(&stream(4, 2), VisualCorruption::SaltPepper, 0.5, 0).is_err());
    }

    #[test]
    fn blur_preserves_constants_and_smooths() {
        let c = FeatureStream::new(Tensor::filled(&[3, 8], 0.7f64), 0.04, Modality::Video).unwrap();
        let out = visual_corrupt(&c, VisualCorruption::GaussianBlur, 0.8, 0).unwrap();
        assert!(out.frames().data().iter().all(|&v| (v - 0.7).abs() < 1e-14));

        let mut spike = Tensor::<f64>::zeros(&[1, 9]);
        spike.set(0, 4, 1.0);
        let s = FeatureStream::new(spike, 0.04, Modality::Video).unwrap();
        let out = visual_corrupt(&s, VisualCorruption::GaussianBlur, 0.5, 0).unwrap();
        let row = out.frames().row(0);
        assert!(row[4] < 1.0 && row[3] > 0.0 && (row[3] - row[5]).abs() < 1e-15);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn feature_file_round_trip() {
        let s = stream(5, 3);
        let bytes = s.to_file().to_bytes().unwrap();
        let back = FeatureStream::<f64>::from_file(FeatureFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_file().to_bytes().unwrap(), bytes);
        assert!(FeatureFile::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(FeatureFile::<f64>::from_bytes(b"AVFFEAT\x01").is_err());
        let bad = FeatureFile::new(Tensor::<f64>::zeros(&[1, 1])).with("a=b", 1);
        assert!(bad.to_bytes().is_err());
    }

    #[test]
    fn align_then_subsample_keeps_lengths_equal() {
        for n_f in [40usize, 100, 101, 67] {
            let n_v = n_f.div_ceil(4);
            let a = stream(n_f, 2);
            let v = video(n_v, 3).align_to(n_f).unwrap();
            assert_eq!(v.len(), n_f);
            let ha = subsample4_average(&a).unwrap();
            let hv = subsample4_average(&v).unwrap();
            assert_eq!(ha.len(), hv.len());
        }
    }
}
