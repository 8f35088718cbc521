//! Constant-Q transform front end.
//!
//! Kernels are Hann-windowed complex exponentials, L1-normalized, applied in the
//! frequency domain to center-padded frames (frame `n` is centered on sample
//! `n * hop`). Magnitudes are log-compressed with `log(1 + |X| / 1e-4)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio::AudioClip;

/// Reference magnitude of the log compression.
pub const LOG_EPS_REF: f64 = 1e-4;
/// Frames per network input window.
pub const WINDOW_FRAMES: usize = 256;

const CACHE_MAGIC: &[u8; 4] = b"TGCQ";
const DTYPE_F32: u32 = 1;

#[derive(Debug, Error)]
pub enum CqtError {
    #[error("invalid CQT configuration: {0}")]
    Config(String),
    #[error("expected a {expected} Hz clip, got {actual} Hz")]
    WrongSampleRate { expected: u32, actual: u32 },
    #[error("clip has {samples} samples; the longest kernel needs {needed}")]
    TooShort { samples: usize, needed: usize },
    #[error("crop of {length} frames at {start} exceeds {frames} frames")]
    OutOfRange {
        start: usize,
        length: usize,
        frames: usize,
    },
    #[error("feature cache {path}: {reason}")]
    Cache { path: String, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Equal-tempered E2 with A4 = 440 Hz.
pub fn e2_frequency() -> f64 {
    440.0 * 2f64.powf(-29.0 / 12.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CqtParams {
    pub sample_rate: u32,
    pub hop: usize,
    pub n_bins: usize,
    pub bins_per_octave: usize,
    pub f_min: f64,
    /// Largest FFT frame a kernel may occupy.
    pub max_fft: usize,
    /// Spectral kernel entries below this fraction of the kernel's peak are dropped.
    pub sparsity: f64,
}

impl Default for CqtParams {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            hop: 512,
            n_bins: 96,
            bins_per_octave: 24,
            f_min: e2_frequency(),
            max_fft: 16_384,
            sparsity: 1e-8,
        }
    }
}

impl CqtParams {
    pub fn q_factor(&self) -> f64 {
        1.0 / (2f64.powf(1.0 / self.bins_per_octave as f64) - 1.0)
    }

    pub fn center_frequency(&self, bin: usize) -> f64 {
        self.f_min * 2f64.powf(bin as f64 / self.bins_per_octave as f64)
    }

    pub fn kernel_length(&self, bin: usize) -> usize {
        (self.q_factor() * self.sample_rate as f64 / self.center_frequency(bin)).ceil() as usize
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    /// Frame count for `n` samples under center padding.
    pub fn frame_count(&self, n: usize) -> usize {
        1 + n / self.hop
    }

    fn validate(&self) -> Result<(), CqtError> {
        if self.sample_rate == 0 || self.hop == 0 || self.n_bins == 0 || self.bins_per_octave == 0 {
            return Err(CqtError::Config("rates, hop and bin counts must be positive".into()));
        }
        if !(self.f_min > 0.0) {
            return Err(CqtError::Config(format!("f_min {} must be positive", self.f_min)));
        }
        let top = self.center_frequency(self.n_bins - 1);
        if top >= self.sample_rate as f64 / 2.0 {
            return Err(CqtError::Config(format!(
                "highest bin {top:.1} Hz is above Nyquist"
            )));
        }
        Ok(())
    }
}

/// Precomputed frequency-domain kernels, one per bin.
pub struct KernelBank {
    params: CqtParams,
    fft_size: usize,
    lengths: Vec<usize>,
    /// Sparse conjugated kernel spectra, pre-divided by the FFT size.
    spectra: Vec<Vec<(usize, Complex64)>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for KernelBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelBank")
            .field("params", &self.params)
            .field("fft_size", &self.fft_size)
            .field("nonzeros", &self.nonzeros())
            .finish()
    }
}

/// Hann-windowed, L1-normalized complex exponential for bin `bin`.
fn time_kernel(params: &CqtParams, bin: usize) -> Vec<Complex64> {
    let n = params.kernel_length(bin);
    let f = params.center_frequency(bin);
    let window: Vec<f64> = (0..n)
        .map(|m| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * m as f64 / n as f64).cos())
        .collect();
    let l1: f64 = window.iter().sum();
    window
        .iter()
        .enumerate()
        .map(|(m, w)| {
            let phase = 2.0 * std::f64::consts::PI * f * m as f64 / params.sample_rate as f64;
            Complex64::from_polar(w / l1, phase)
        })
        .collect()
}

impl KernelBank {
    pub fn new(params: CqtParams) -> Result<Self, CqtError> {
        params.validate()?;
        let longest = params.kernel_length(0);
        let fft_size = longest.next_power_of_two();
        if fft_size > params.max_fft {
            return Err(CqtError::Config(format!(
                "kernel of {longest} samples needs a {fft_size}-point frame; budget is {}",
                params.max_fft
            )));
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(fft_size);
        let mut lengths = Vec::with_capacity(params.n_bins);
        let mut spectra = Vec::with_capacity(params.n_bins);
        for bin in 0..params.n_bins {
            let kernel = time_kernel(&params, bin);
            let n = kernel.len();
            // kernel tap m sits at frame offset m - n/2 around the frame center
            let start = fft_size / 2 - n / 2;
            let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
            buf[start..start + n].copy_from_slice(&kernel);
            fft.process(&mut buf);
            let peak = buf.iter().map(|c| c.norm()).fold(0.0, f64::max);
            let scale = 1.0 / fft_size as f64;
            let sparse: Vec<(usize, Complex64)> = buf
                .iter()
                .enumerate()
                .filter(|(_, c)| c.norm() > params.sparsity * peak)
                .map(|(i, c)| (i, c.conj() * scale))
                .collect();
            lengths.push(n);
            spectra.push(sparse);
        }
        Ok(Self {
            params,
            fft_size,
            lengths,
            spectra,
            fft,
        })
    }

    pub fn params(&self) -> &CqtParams {
        &self.params
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn kernel_lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn center_frequencies(&self) -> Vec<f64> {
        (0..self.params.n_bins)
            .map(|k| self.params.center_frequency(k))
            .collect()
    }

    pub fn nonzeros(&self) -> usize {
        self.spectra.iter().map(Vec::len).sum()
    }

    /// Linear CQT magnitudes, row-major `frames x bins`.
    pub fn magnitudes(&self, clip: &AudioClip) -> Result<(usize, Vec<f64>), CqtError> {
        if clip.sample_rate() != self.params.sample_rate {
            return Err(CqtError::WrongSampleRate {
                expected: self.params.sample_rate,
                actual: clip.sample_rate(),
            });
        }
        let needed = self.lengths[0];
        if clip.len() < needed {
            return Err(CqtError::TooShort {
                samples: clip.len(),
                needed,
            });
        }
        let x = clip.samples();
        let frames = self.params.frame_count(x.len());
        let bins = self.params.n_bins;
        let half = (self.fft_size / 2) as i64;
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_size];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for frame in 0..frames {
            let origin = (frame * self.params.hop) as i64 - half;
            for (j, slot) in buf.iter_mut().enumerate() {
                let i = origin + j as i64;
                *slot = if i >= 0 && (i as usize) < x.len() {
                    Complex64::new(x[i as usize], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for kernel in &self.spectra {
                let acc: Complex64 = kernel.iter().map(|&(i, k)| buf[i] * k).sum();
                out.push(acc.norm());
            }
        }
        Ok((frames, out))
    }
}

/// Log-compressed CQT, row-major `frames x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct CqtMatrix {
    frames: usize,
    bins: usize,
    values: Vec<f64>,
    hop_seconds: f64,
    padded: bool,
}

impl CqtMatrix {
    pub fn from_values(
        frames: usize,
        bins: usize,
        values: Vec<f64>,
        hop_seconds: f64,
    ) -> Result<Self, CqtError> {
        if values.len() != frames * bins {
            return Err(CqtError::Config(format!(
                "{} values do not fill a {frames}x{bins} grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CqtError::Config("non-finite CQT value".into()));
        }
        Ok(Self {
            frames,
            bins,
            values,
            hop_seconds,
            padded: false,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_seconds
    }

    /// True when frames were synthesized by edge replication.
    pub fn is_padded(&self) -> bool {
        self.padded
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.bins..(frame + 1) * self.bins]
    }

    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.bins + bin]
    }

    pub fn argmax_bin(&self, frame: usize) -> usize {
        let row = self.row(frame);
        (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .unwrap_or(0)
    }

    /// Right-pads to at least `frames` by repeating the last frame.
    pub fn pad_to(&self, frames: usize) -> Self {
        if self.frames >= frames {
            return self.clone();
        }
        let mut values = self.values.clone();
        let last = self.row(self.frames - 1).to_vec();
        for _ in self.frames..frames {
            values.extend_from_slice(&last);
        }
        Self {
            frames,
            bins: self.bins,
            values,
            hop_seconds: self.hop_seconds,
            padded: true,
        }
    }

    /// Writes the cache layout: magic, frames, bins, dtype code, then f32 rows.
    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<(), CqtError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(self.bins as u32).to_le_bytes())?;
        w.write_all(&DTYPE_F32.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_cache(path: impl AsRef<Path>, hop_seconds: f64) -> Result<Self, CqtError> {
        let path = path.as_ref();
        let bad = |reason: &str| CqtError::Cache {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        if &header[0..4] != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (frames, bins, dtype) = (word(4), word(8), word(12) as u32);
        if dtype != DTYPE_F32 {
            return Err(bad("unsupported dtype"));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != frames * bins * 4 {
            return Err(bad("payload size does not match header"));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_values(frames, bins, values, hop_seconds)
    }
}

/// CQT of a 16 kHz clip with log compression.
pub fn compute_cqt(clip: &AudioClip, bank: &KernelBank) -> Result<CqtMatrix, CqtError> {
    let (frames, mags) = bank.magnitudes(clip)?;
    let values = mags.iter().map(|m| (m / LOG_EPS_REF).ln_1p()).collect();
    CqtMatrix::from_values(
        frames,
        bank.params.n_bins,
        values,
        bank.params.hop_seconds(),
    )
}

/// Contiguous crop of `length` frames starting at `start`.
pub fn frame_window(cqt: &CqtMatrix, start: usize, length: usize) -> Result<CqtMatrix, CqtError> {
    if start + length > cqt.frames || length == 0 {
        return Err(CqtError::OutOfRange {
            start,
            length,
            frames: cqt.frames,
        });
    }
    Ok(CqtMatrix {
        frames: length,
        bins: cqt.bins,
        values: cqt.values[start * cqt.bins..(start + length) * cqt.bins].to_vec(),
        hop_seconds: cqt.hop_seconds,
        padded: cqt.padded,
    })
}

/// Per-matrix standardization to zero mean and unit variance; constant input maps to zeros.
pub fn normalize(cqt: &CqtMatrix) -> CqtMatrix {
    let n = cqt.values.len() as f64;
    let mean = cqt.values.iter().sum::<f64>() / n;
    let var = cqt.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let values = if var <= 1e-24 {
        vec![0.0; cqt.values.len()]
    } else {
        let sd = var.sqrt();
        cqt.values.iter().map(|v| (v - mean) / sd).collect()
    };
    CqtMatrix {
        values,
        ..cqt.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn clip_from(f: impl Fn(f64) -> f64, n: usize) -> AudioClip {
        AudioClip::new((0..n).map(|i| f(i as f64 / 16_000.0)).collect(), 16_000, "t").unwrap()
    }

    #[test]
    fn center_frequencies() {
        let p = CqtParams::default();
        assert!((p.center_frequency(0) - 82.4069).abs() < 1e-4);
        assert!((p.center_frequency(24) - 164.8138).abs() < 1e-3);
        assert!((p.center_frequency(24) - 2.0 * p.center_frequency(0)).abs() < 1e-9);
        assert!((p.center_frequency(95) - 1280.975).abs() < 1e-3);
        assert!((p.q_factor() - 34.127).abs() < 1e-3);
        let f: Vec<f64> = (0..96).map(|k| p.center_frequency(k)).collect();
        let ratio = 2f64.powf(1.0 / 24.0);
        assert!(f.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-12));
    }

    #[test]
    fn fft_budget_is_enforced() {
        let p = CqtParams {
            max_fft: 4096,
            ..CqtParams::default()
        };
        assert!(matches!(KernelBank::new(p), Err(CqtError::Config(_))));
    }

    #[test]
    fn frame_count_under_center_padding() {
        let bank = KernelBank::new(CqtParams::default()).unwrap();
        let clip = clip_from(|_| 0.0, 131_072);
        let cqt = compute_cqt(&clip, &bank).unwrap();
        assert_eq!(cqt.frames(), 257);
        assert_eq!(cqt.bins(), 96);
        let floor = (0.0f64 / LOG_EPS_REF).ln_1p();
        assert!(cqt.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let bank = KernelBank::new(CqtParams::default()).unwrap();
        let clip = clip_from(|t| 0.5 * (2.0 * PI * 440.0 * t).sin(), 32_000);
        let cqt = compute_cqt(&clip, &bank).unwrap();
        let margin = 8;
        for frame in margin..cqt.frames() - margin {
            assert_eq!(cqt.argmax_bin(frame), 58, "frame {frame}");
        }
    }

    #[test]
    fn rejects_wrong_rate_and_short_clip() {
        let bank = KernelBank::new(CqtParams::default()).unwrap();
        let clip = AudioClip::new(vec![0.0; 20_000], 22_050, "x").unwrap();
        assert!(matches!(
            compute_cqt(&clip, &bank),
            Err(CqtError::WrongSampleRate { .. })
        ));
        let short = clip_from(|_| 0.0, 1000);
        assert!(matches!(
            compute_cqt(&short, &bank),
            Err(CqtError::TooShort { .. })
        ));
    }

    #[test]
    fn crops() {
        let values: Vec<f64> = (0..512 * 4).map(|v| v as f64).collect();
        let m = CqtMatrix::from_values(512, 4, values, 0.032).unwrap();
        let c = frame_window(&m, 64, 256).unwrap();
        assert_eq!(c.frames(), 256);
        assert_eq!(c.row(0), m.row(64));
        assert_eq!(c.row(255), m.row(319));
        let whole = frame_window(&frame_window(&m, 0, 256).unwrap(), 0, 256).unwrap();
        assert_eq!(whole, frame_window(&m, 0, 256).unwrap());
        assert!(matches!(
            frame_window(&m, 300, 256),
            Err(CqtError::OutOfRange { .. })
        ));
    }

    #[test]
    fn normalize_standardizes() {
        let zero = CqtMatrix::from_values(4, 3, vec![0.0; 12], 0.032).unwrap();
        assert!(normalize(&zero).values().iter().all(|&v| v == 0.0));
        let values: Vec<f64> = (0..300).map(|i| ((i * 37) % 101) as f64 * 0.3).collect();
        let m = normalize(&CqtMatrix::from_values(100, 3, values, 0.032).unwrap());
        let n = m.values().len() as f64;
        let mean = m.values().iter().sum::<f64>() / n;
        let var = m.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn loudness_scaling_preserves_argmax() {
        let bank = KernelBank::new(CqtParams::default()).unwrap();
        let tone = |t: f64| 0.05 * (2.0 * PI * 220.0 * t).sin() + 0.02 * (2.0 * PI * 660.0 * t).sin();
        let quiet = compute_cqt(&clip_from(tone, 20_000), &bank).unwrap();
        let loud = compute_cqt(&clip_from(|t| 10.0 * tone(t), 20_000), &bank).unwrap();
        let (q, l) = (normalize(&quiet), normalize(&loud));
        for f in 0..q.frames() {
            assert_eq!(q.argmax_bin(f), l.argmax_bin(f));
        }
    }

    #[test]
    fn pad_replicates_last_frame() {
        let m = CqtMatrix::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0], 0.032).unwrap();
        let p = m.pad_to(4);
        assert!(p.is_padded());
        assert_eq!(p.row(3), &[3.0, 4.0]);
        assert!(!m.pad_to(2).is_padded());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tgcq");
        let values: Vec<f64> = (0..30).map(|v| v as f64 * 0.25).collect();
        let m = CqtMatrix::from_values(10, 3, values, 0.032).unwrap();
        m.write_cache(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 30 * 4);
        assert_eq!(&bytes[0..4], b"TGCQ");
        let back = CqtMatrix::read_cache(&path, 0.032).unwrap();
        assert_eq!(back, m);
    }
}
