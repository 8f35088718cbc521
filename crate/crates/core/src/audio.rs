//! Audio ingest: WAV loading, band-limited resampling and fixed-hop windowing.
//!
//! Everything downstream consumes 16 kHz mono clips with samples in `[-1, 1]`.

use std::path::Path;

use thiserror::Error;

/// Canonical sample rate for every feature extractor in the crate.
pub const TARGET_RATE: u32 = 16_000;

/// Kaiser shape parameter of the resampling filter.
pub const KAISER_BETA: f64 = 8.6;
/// Taps per polyphase branch, counted at the lower of the two rates.
pub const TAPS_PER_PHASE: usize = 64;
/// Filter cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;
/// Above this many phases the coefficient table is not precomputed.
const MAX_TABLE_PHASES: usize = 4096;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("audio file not found: {0}")]
    NotFound(String),
    #[error("malformed WAV header in {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("unsupported WAV codec in {path}: {reason}")]
    Unsupported { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("clip is empty")]
    Empty,
    #[error("sample rate must be positive")]
    NonPositiveRate,
    #[error("sample {index} is invalid ({value}); samples must be finite and within [-1, 1]")]
    InvalidSample { index: usize, value: f64 },
    #[error("window and hop must be positive (window {win_seconds} s, hop {hop_seconds} s)")]
    InvalidWindow { win_seconds: f64, hop_seconds: f64 },
    #[error("clip of {duration:.3} s is shorter than one {window:.3} s window")]
    TooShort { duration: f64, window: f64 },
}

/// A mono clip with samples normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
    source_id: String,
}

impl AudioClip {
    pub fn new(
        samples: Vec<f64>,
        sample_rate: u32,
        source_id: impl Into<String>,
    ) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::NonPositiveRate);
        }
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(AudioError::InvalidSample { index, value });
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Returns a copy with every sample multiplied by `gain`, clamped to `[-1, 1]`.
    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|s| (s * gain).clamp(-1.0, 1.0))
                .collect(),
            sample_rate: self.sample_rate,
            source_id: self.source_id.clone(),
        }
    }

    fn sub_clip(&self, start: usize, len: usize, index: usize) -> Self {
        Self {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
            source_id: format!("{}#{}", self.source_id, index),
        }
    }
}

/// Reads a RIFF/WAVE file holding 16-bit PCM or 32-bit IEEE float, mono or stereo.
///
/// Stereo is averaged to mono; 16-bit integers are divided by 32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    if !path.exists() {
        return Err(AudioError::NotFound(display));
    }
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(e, &display))?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(AudioError::Unsupported {
            path: display,
            reason: format!("{} channels", spec.channels),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(e, &display))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(e, &display))?,
        (format, bits) => {
            return Err(AudioError::Unsupported {
                path: display,
                reason: format!("{format:?} with {bits} bits per sample"),
            })
        }
    };
    let channels = spec.channels as usize;
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| display.clone());
    AudioClip::new(mono, spec.sample_rate, id)
}

fn map_hound(err: hound::Error, path: &str) -> AudioError {
    match err {
        hound::Error::IoError(source) => AudioError::Io {
            path: path.to_string(),
            source,
        },
        hound::Error::Unsupported => AudioError::Unsupported {
            path: path.to_string(),
            reason: "codec not supported".into(),
        },
        other => AudioError::Malformed {
            path: path.to_string(),
            reason: other.to_string(),
        },
    }
}

/// Writes a clip as mono 16-bit PCM.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(e, &display))?;
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| map_hound(e, &display))?;
    }
    writer.finalize().map_err(|e| map_hound(e, &display))
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Polyphase windowed-sinc converter for a rational rate ratio `up / down`.
struct Polyphase {
    up: u64,
    down: u64,
    half_width: i64,
    cutoff: f64,
    span: f64,
    i0_beta: f64,
    table: Option<Vec<Vec<f64>>>,
}

impl Polyphase {
    fn new(source: u32, target: u32) -> Self {
        let g = gcd(source as u64, target as u64);
        let up = target as u64 / g;
        let down = source as u64 / g;
        // Filter length in input samples grows with the decimation factor so the
        // transition band stays fixed relative to the output Nyquist.
        let stretch = (down as f64 / up as f64).max(1.0);
        let half_width = ((TAPS_PER_PHASE as f64 / 2.0) * stretch).ceil() as i64;
        let cutoff = 0.5 * ROLLOFF / stretch;
        let mut p = Self {
            up,
            down,
            half_width,
            cutoff,
            span: half_width as f64,
            i0_beta: bessel_i0(KAISER_BETA),
            table: None,
        };
        if (up as usize) <= MAX_TABLE_PHASES {
            p.table = Some((0..up).map(|phase| p.branch(phase)).collect());
        }
        p
    }

    /// Coefficients for input offsets `base - half_width + 1 ..= base + half_width`.
    fn branch(&self, phase: u64) -> Vec<f64> {
        let frac = phase as f64 / self.up as f64;
        let mut taps: Vec<f64> = (-self.half_width + 1..=self.half_width)
            .map(|offset| {
                // distance between the output instant and input sample base + offset
                let d = frac - offset as f64;
                let r = d / self.span;
                if r.abs() >= 1.0 {
                    return 0.0;
                }
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.i0_beta;
                2.0 * self.cutoff * sinc(2.0 * self.cutoff * d) * w
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        if sum.abs() > 0.0 {
            taps.iter_mut().for_each(|t| *t /= sum);
        }
        taps
    }

    fn run(&self, input: &[f64]) -> Vec<f64> {
        let n = input.len() as u64;
        let out_len = ((2 * n * self.up + self.down) / (2 * self.down)).max(1);
        let mut out = Vec::with_capacity(out_len as usize);
        let mut scratch;
        for j in 0..out_len {
            let pos = j * self.down;
            let base = (pos / self.up) as i64;
            let phase = pos % self.up;
            let taps: &[f64] = match &self.table {
                Some(t) => &t[phase as usize],
                None => {
                    scratch = self.branch(phase);
                    &scratch
                }
            };
            let first = base - self.half_width + 1;
            let mut acc = 0.0;
            for (k, &c) in taps.iter().enumerate() {
                let i = first + k as i64;
                if i >= 0 && (i as usize) < input.len() {
                    acc += c * input[i as usize];
                }
            }
            out.push(acc.clamp(-1.0, 1.0));
        }
        out
    }
}

/// Band-limited rate conversion. A clip already at `target_rate` is returned unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 || clip.sample_rate == 0 {
        return Err(AudioError::NonPositiveRate);
    }
    if clip.samples.is_empty() {
        return Err(AudioError::Empty);
    }
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }
    let converter = Polyphase::new(clip.sample_rate, target_rate);
    Ok(AudioClip {
        samples: converter.run(&clip.samples),
        sample_rate: target_rate,
        source_id: clip.source_id.clone(),
    })
}

/// Number of windows of `win` samples at hop `hop` that fit in `n` samples.
pub fn window_count(n: usize, win: usize, hop: usize) -> usize {
    if n < win || hop == 0 {
        0
    } else {
        (n - win) / hop + 1
    }
}

/// Cuts fixed-length windows starting at `0, hop, 2*hop, ...`.
///
/// A clip shorter than one window is an error; padding is left to the caller.
pub fn slice_windows(
    clip: &AudioClip,
    win_seconds: f64,
    hop_seconds: f64,
) -> Result<Vec<AudioClip>, AudioError> {
    if !(win_seconds > 0.0 && hop_seconds > 0.0) {
        return Err(AudioError::InvalidWindow {
            win_seconds,
            hop_seconds,
        });
    }
    let rate = clip.sample_rate as f64;
    let win = (win_seconds * rate).round() as usize;
    let hop = (hop_seconds * rate).round() as usize;
    if win == 0 || hop == 0 {
        return Err(AudioError::InvalidWindow {
            win_seconds,
            hop_seconds,
        });
    }
    let count = window_count(clip.len(), win, hop);
    if count == 0 {
        return Err(AudioError::TooShort {
            duration: clip.duration_seconds(),
            window: win_seconds,
        });
    }
    Ok((0..count)
        .map(|i| clip.sub_clip(i * hop, win, i))
        .collect())
}
