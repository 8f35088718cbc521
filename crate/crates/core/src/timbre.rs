//! Timbregrams: per-window timbre embeddings, the voicing filter, min-max
//! normalization and mean/variance aggregation into the 512-dim branch input.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{resample, slice_windows, window_count, AudioClip, AudioError, TARGET_RATE};

pub const EMBED_DIM: usize = 256;
pub const TIMBRE_DIM: usize = 2 * EMBED_DIM;
pub const WINDOW_SECONDS: f64 = 3.0;
pub const HOP_SECONDS: f64 = 1.0;
/// Minimum voiced fraction for a window to count.
pub const MIN_VOICING: f64 = 0.70;
/// Voiced frames lie within this many dB of the loudest frame.
pub const VOICING_DB: f64 = 35.0;

const VAD_FRAME: usize = 400;
const VAD_HOP: usize = 160;
const RMS_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum TimbreError {
    #[error("embedding has {0} dimensions, expected {EMBED_DIM}")]
    Dimension(usize),
    #[error("embedding contains a non-finite value at {0}")]
    NonFinite(usize),
    #[error("embedder expects {expected} samples at {rate} Hz, got {actual} at {actual_rate} Hz")]
    WindowLength {
        expected: usize,
        rate: u32,
        actual: usize,
        actual_rate: u32,
    },
    #[error("timbregram has no valid rows")]
    NoValidRows,
    #[error("malformed precomputed embedding at line {line}: {reason}")]
    Precomputed { line: usize, reason: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimbreEmbedding {
    #[serde(rename = "start_s")]
    pub window_start: f64,
    pub valid: bool,
    #[serde(rename = "vec")]
    pub vector: Vec<f64>,
}

impl TimbreEmbedding {
    pub fn new(window_start: f64, valid: bool, vector: Vec<f64>) -> Result<Self, TimbreError> {
        if vector.len() != EMBED_DIM {
            return Err(TimbreError::Dimension(vector.len()));
        }
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(TimbreError::NonFinite(i));
        }
        Ok(Self {
            window_start,
            valid,
            vector,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timbregram {
    pub rows: Vec<TimbreEmbedding>,
}

impl Timbregram {
    pub fn valid_rows(&self) -> impl Iterator<Item = &TimbreEmbedding> {
        self.rows.iter().filter(|r| r.valid)
    }

    pub fn valid_count(&self) -> usize {
        self.valid_rows().count()
    }

    /// Reads the JSON-lines form `{start_s, valid, vec}`, one window per line.
    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self, TimbreError> {
        let file = std::fs::File::open(path)?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| TimbreError::Precomputed { line: i + 1, reason };
            let row: TimbreEmbedding = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let row = TimbreEmbedding::new(row.window_start, row.valid, row.vector).map_err(|e| bad(e.to_string()))?;
            rows.push(row);
        }
        rows.sort_by(|a, b| a.window_start.total_cmp(&b.window_start));
        Ok(Self { rows })
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), TimbreError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for row in &self.rows {
            serde_json::to_writer(&mut out, row).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// The 512-dim Timbre Branch input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimbreVector {
    values: Vec<f64>,
    /// No valid embeddings were available; `values` is all zeros.
    pub missing: bool,
}

impl TimbreVector {
    pub fn new(values: Vec<f64>) -> Result<Self, TimbreError> {
        if values.len() != TIMBRE_DIM {
            return Err(TimbreError::Dimension(values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TimbreError::NonFinite(i));
        }
        Ok(Self {
            values,
            missing: false,
        })
    }

    /// Stand-in used when a clip has no valid embeddings.
    pub fn missing() -> Self {
        Self {
            values: vec![0.0; TIMBRE_DIM],
            missing: true,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean_half(&self) -> &[f64] {
        &self.values[..EMBED_DIM]
    }

    pub fn variance_half(&self) -> &[f64] {
        &self.values[EMBED_DIM..]
    }
}

/// Maps one 3 s, 16 kHz window to a 256-dim embedding.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, window: &AudioClip) -> Result<Vec<f64>, TimbreError>;
}

/// Fraction of 25 ms frames (10 ms hop) within 35 dB of the loudest frame.
pub fn voicing_ratio(window: &AudioClip) -> f64 {
    let s = window.samples();
    let (frame, hop) = (VAD_FRAME.min(s.len()), VAD_HOP);
    let count = window_count(s.len(), frame, hop).max(1);
    let rms: Vec<f64> = (0..count)
        .map(|i| {
            let f = &s[i * hop..i * hop + frame];
            (f.iter().map(|v| v * v).sum::<f64>() / frame as f64).sqrt()
        })
        .collect();
    let max = rms.iter().cloned().fold(0.0, f64::max);
    if max <= RMS_FLOOR {
        return 0.0;
    }
    let threshold = max * 10f64.powf(-VOICING_DB / 20.0);
    rms.iter().filter(|&&r| r > threshold).count() as f64 / count as f64
}

/// Slices the clip into 3 s windows at 1 s hop and embeds each one.
pub fn build_timbregram(clip: &AudioClip, provider: &dyn EmbeddingProvider) -> Result<Timbregram, TimbreError> {
    let clip = resample(clip, TARGET_RATE)?;
    let windows = slice_windows(&clip, WINDOW_SECONDS, HOP_SECONDS)?;
    let rows = windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let valid = voicing_ratio(w) >= MIN_VOICING;
            TimbreEmbedding::new(i as f64 * HOP_SECONDS, valid, provider.embed(w)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Timbregram { rows })
}

fn valid_extent(gram: &Timbregram) -> Result<(Vec<f64>, Vec<f64>), TimbreError> {
    let mut lo = vec![f64::INFINITY; EMBED_DIM];
    let mut hi = vec![f64::NEG_INFINITY; EMBED_DIM];
    for row in gram.valid_rows() {
        for (d, &v) in row.vector.iter().enumerate() {
            lo[d] = lo[d].min(v);
            hi[d] = hi[d].max(v);
        }
    }
    if gram.valid_count() == 0 {
        return Err(TimbreError::NoValidRows);
    }
    Ok((lo, hi))
}

/// Per-dimension min-max scaling over valid rows; constant dimensions map to 0.
/// Invalid rows are scaled with the same extent and kept for bookkeeping.
pub fn minmax_normalize(gram: &Timbregram) -> Result<Timbregram, TimbreError> {
    let (lo, hi) = valid_extent(gram)?;
    let rows = gram
        .rows
        .iter()
        .map(|r| {
            let vector = r
                .vector
                .iter()
                .enumerate()
                .map(|(d, &v)| {
                    let span = hi[d] - lo[d];
                    if span > 0.0 {
                        (v - lo[d]) / span
                    } else {
                        0.0
                    }
                })
                .collect();
            TimbreEmbedding {
                window_start: r.window_start,
                valid: r.valid,
                vector,
            }
        })
        .collect();
    Ok(Timbregram { rows })
}

/// Population mean (dims 0..256) and variance (dims 256..512) over valid rows.
pub fn aggregate(gram: &Timbregram) -> Result<TimbreVector, TimbreError> {
    let n = gram.valid_count();
    if n == 0 {
        return Err(TimbreError::NoValidRows);
    }
    let mut mean = vec![0.0; EMBED_DIM];
    for row in gram.valid_rows() {
        for (m, v) in mean.iter_mut().zip(&row.vector) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; EMBED_DIM];
    for row in gram.valid_rows() {
        for ((s, v), m) in var.iter_mut().zip(&row.vector).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    mean.extend(var);
    TimbreVector::new(mean)
}

/// Normalized and aggregated timbre input, or the flagged zero vector when no
/// window passes the voicing filter.
pub fn timbre_vector(gram: &Timbregram) -> Result<TimbreVector, TimbreError> {
    match minmax_normalize(gram) {
        Ok(norm) => aggregate(&norm),
        Err(TimbreError::NoValidRows) => Ok(TimbreVector::missing()),
        Err(e) => Err(e),
    }
}

/// Deterministic spectral-statistics embedder.
///
/// Statistics: 32 band log-energy means, 32 band log-energy variances,
/// 32 band positive-flux means, and centroid, rolloff and flatness for each of
/// four sub-windows. They are zero-padded to 256 and rotated by a fixed random
/// orthogonal matrix.
pub struct StubEmbedder {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

pub const STUB_SEED: u64 = 0x7467_6372_6974_6963;
pub const STUB_BANDS: usize = 32;
pub const STUB_SUBWINDOWS: usize = 4;
/// Length of the raw statistics vector before projection.
pub const STUB_STATS: usize = 3 * STUB_BANDS + 3 * STUB_SUBWINDOWS;

const STUB_FRAME: usize = 512;
const STUB_HOP: usize = 256;
const POWER_FLOOR: f64 = 1e-12;
const ROLLOFF_FRACTION: f64 = 0.85;

fn projection() -> &'static Vec<f64> {
    static MATRIX: OnceLock<Vec<f64>> = OnceLock::new();
    MATRIX.get_or_init(|| orthogonal_matrix(EMBED_DIM, STUB_SEED))
}

/// Row-major `n x n` orthogonal matrix: Gram-Schmidt (two passes) on Gaussian rows.
pub fn orthogonal_matrix(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    for i in 0..n {
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
                for k in 0..n {
                    m[i * n + k] -= dot * m[j * n + k];
                }
            }
        }
        let norm = (0..n).map(|k| m[i * n + k].powi(2)).sum::<f64>().sqrt();
        for k in 0..n {
            m[i * n + k] /= norm;
        }
    }
    m
}

impl Default for StubEmbedder {
    fn default() -> Self {
        Self::new()
    }
}

impl StubEmbedder {
    pub fn new() -> Self {
        let window = (0..STUB_FRAME)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / STUB_FRAME as f64).cos())
            .collect();
        Self {
            fft: FftPlanner::new().plan_fft_forward(STUB_FRAME),
            window,
        }
    }

    fn check(window: &AudioClip) -> Result<(), TimbreError> {
        let expected = (WINDOW_SECONDS * TARGET_RATE as f64) as usize;
        if window.sample_rate() != TARGET_RATE || window.len() != expected {
            return Err(TimbreError::WindowLength {
                expected,
                rate: TARGET_RATE,
                actual: window.len(),
                actual_rate: window.sample_rate(),
            });
        }
        Ok(())
    }

    fn power_frames(&self, s: &[f64]) -> Vec<Vec<f64>> {
        let n = window_count(s.len(), STUB_FRAME, STUB_HOP);
        let mut buf = vec![Complex::new(0.0, 0.0); STUB_FRAME];
        (0..n)
            .map(|i| {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = Complex::new(s[i * STUB_HOP + k] * self.window[k], 0.0);
                }
                self.fft.process(&mut buf);
                buf[1..=STUB_FRAME / 2].iter().map(|c| c.norm_sqr()).collect()
            })
            .collect()
    }

    /// The raw statistics vector (length [`STUB_STATS`]).
    pub fn statistics(&self, window: &AudioClip) -> Result<Vec<f64>, TimbreError> {
        Self::check(window)?;
        let frames = self.power_frames(window.samples());
        let bins = STUB_FRAME / 2;
        let width = bins / STUB_BANDS;
        let log_bands: Vec<Vec<f64>> = frames
            .iter()
            .map(|p| {
                p.chunks(width)
                    .map(|band| (band.iter().sum::<f64>() + POWER_FLOOR).ln())
                    .collect()
            })
            .collect();
        let nf = frames.len() as f64;
        let mut stats = Vec::with_capacity(STUB_STATS);
        let means: Vec<f64> = (0..STUB_BANDS)
            .map(|b| log_bands.iter().map(|f| f[b]).sum::<f64>() / nf)
            .collect();
        let vars: Vec<f64> = (0..STUB_BANDS)
            .map(|b| log_bands.iter().map(|f| (f[b] - means[b]).powi(2)).sum::<f64>() / nf)
            .collect();
        let flux: Vec<f64> = (0..STUB_BANDS)
            .map(|b| {
                log_bands
                    .windows(2)
                    .map(|w| (w[1][b] - w[0][b]).max(0.0))
                    .sum::<f64>()
                    / (nf - 1.0).max(1.0)
            })
            .collect();
        stats.extend(means);
        stats.extend(vars);
        stats.extend(flux);

        let per = frames.len() / STUB_SUBWINDOWS;
        for sub in frames.chunks(per).take(STUB_SUBWINDOWS) {
            let mut spec = vec![0.0; bins];
            for f in sub {
                for (a, p) in spec.iter_mut().zip(f) {
                    *a += p / sub.len() as f64;
                }
            }
            let spec: Vec<f64> = spec.iter().map(|p| p + POWER_FLOOR).collect();
            let total: f64 = spec.iter().sum();
            let centroid = spec.iter().enumerate().map(|(k, p)| (k + 1) as f64 * p).sum::<f64>() / total / bins as f64;
            let mut acc = 0.0;
            let mut roll = bins;
            for (k, p) in spec.iter().enumerate() {
                acc += p;
                if acc >= ROLLOFF_FRACTION * total {
                    roll = k + 1;
                    break;
                }
            }
            let geo = (spec.iter().map(|p| p.ln()).sum::<f64>() / bins as f64).exp();
            let flatness = geo / (total / bins as f64);
            stats.extend([centroid, roll as f64 / bins as f64, flatness]);
        }
        Ok(stats)
    }
}

impl EmbeddingProvider for StubEmbedder {
    fn name(&self) -> &str {
        "stub-spectral"
    }

    fn embed(&self, window: &AudioClip) -> Result<Vec<f64>, TimbreError> {
        let mut stats = self.statistics(window)?;
        stats.resize(EMBED_DIM, 0.0);
        let q = projection();
        Ok((0..EMBED_DIM)
            .map(|i| (0..EMBED_DIM).map(|k| q[i * EMBED_DIM + k] * stats[k]).sum())
            .collect())
    }
}
