//! Iterative automatic annotation: random forests over metadata (and, from the
//! second iteration on, evaluation-curve statistics) label an unlabeled pool, a
//! TG-Critic is trained on those labels, and its curves feed the next round.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioClip, AudioError, TARGET_RATE};
use crate::cqt::CqtMatrix;
use crate::forest::{forest_predict, train_forest, ForestConfig, ForestError};
use crate::model::{Class, ClassProbs, CurvePoint, EvaluationCurve, ModelConfig, ModelError, TgCritic};
use crate::nn::Tensor;
use crate::timbre::TimbreVector;
use crate::train::{metrics, train, MetricsReport, TrainError, TrainSchedule, TrainingExample};

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("seed set lacks class {0}")]
    MissingClass(Class),
    #[error("evaluation curve is empty")]
    EmptyCurve,
    #[error("need at least {0} samples per class")]
    TooFewPerClass(usize),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub intonation_score: f64,
    pub rhythm_score: f64,
    pub likes: u64,
    pub comments: u64,
    /// Only present for synthetic data; never used as a feature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub popularity_confounder: Option<f64>,
}

impl MetadataRecord {
    /// Forest inputs: the two scores and log-counts of likes and comments.
    pub fn features(&self) -> Vec<f64> {
        vec![
            self.intonation_score,
            self.rhythm_score,
            (self.likes as f64).ln_1p(),
            (self.comments as f64).ln_1p(),
        ]
    }
}

pub const METADATA_FEATURES: usize = 4;
pub const CURVE_FEATURES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "iteration")]
pub enum LabelSource {
    Manual,
    Automatic(usize),
}

impl std::fmt::Display for LabelSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelSource::Manual => f.write_str("manual"),
            LabelSource::Automatic(k) => write!(f, "automatic@{k}"),
        }
    }
}

/// `A` if `pA >= tau` and its margin is at least `pI`'s; `I` if `pI >= tau` and
/// its margin is strictly larger; otherwise `M`.
pub fn assign_label(p_a: f64, p_i: f64, tau: f64) -> Class {
    if p_a >= tau && p_a - tau >= p_i - tau {
        Class::Awesome
    } else if p_i >= tau && p_i - tau > p_a - tau {
        Class::Inferior
    } else {
        Class::Mediocre
    }
}

/// Mean, std (population), min and max of each class's window probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveFeatures {
    /// Indexed A, M, I; each `[mean, std, min, max]`.
    pub stats: [[f64; 4]; 3],
}

impl CurveFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        self.stats.iter().flatten().copied().collect()
    }
}

pub fn curve_features(curve: &EvaluationCurve) -> Result<CurveFeatures, AnnotateError> {
    if curve.is_empty() {
        return Err(AnnotateError::EmptyCurve);
    }
    let n = curve.len() as f64;
    let mut stats = [[0.0; 4]; 3];
    for (c, s) in stats.iter_mut().enumerate() {
        let vals: Vec<f64> = curve.points.iter().map(|p| p.probs.as_array()[c]).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // a flat curve has exactly zero spread, whatever the rounding in `mean`
        let std = if min == max { 0.0 } else { var.sqrt() };
        *s = [mean, std, min, max];
    }
    Ok(CurveFeatures { stats })
}

/// A song ready for the loop: metadata, network inputs and (for the seed set or
/// synthetic data) a known class.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub metadata: MetadataRecord,
    pub cqt: CqtMatrix,
    pub timbre: TimbreVector,
    /// Manual label (seed set) or hidden ground truth (synthetic pool).
    pub truth: Option<Class>,
}

/// Produces an evaluation curve for a prepared song.
pub trait CurveModel: Sync {
    fn curve(&self, sample: &PreparedSample) -> Result<EvaluationCurve, AnnotateError>;
}

impl CurveModel for TgCritic {
    fn curve(&self, sample: &PreparedSample) -> Result<EvaluationCurve, AnnotateError> {
        Ok(self.evaluation_curve(&sample.cqt, &Tensor::vector(sample.timbre.values().to_vec()))?)
    }
}

/// Trains the curve model of one iteration from automatically labeled examples.
pub trait CurveTrainer: Sync {
    type Model: CurveModel;
    /// `previous` is the model of the prior iteration, if any.
    fn fit(
        &self,
        data: &[TrainingExample],
        iteration: usize,
        previous: Option<&Self::Model>,
    ) -> Result<Self::Model, AnnotateError>;
}

/// Trains a TG-Critic each iteration, either from scratch or continuing from
/// the previous iteration's weights.
#[derive(Debug, Clone)]
pub struct NetworkTrainer {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub warm_start: bool,
}

impl CurveTrainer for NetworkTrainer {
    type Model = TgCritic;

    fn fit(
        &self,
        data: &[TrainingExample],
        iteration: usize,
        previous: Option<&TgCritic>,
    ) -> Result<TgCritic, AnnotateError> {
        let mut cfg = self.model.clone();
        cfg.seed = cfg.seed.wrapping_add(iteration as u64);
        let mut model = TgCritic::new(cfg)?;
        if let (true, Some(prev)) = (self.warm_start, previous) {
            *model.store_mut() = prev.store().clone();
        }
        let mut schedule = self.schedule.clone();
        schedule.seed = schedule.seed.wrapping_add(iteration as u64);
        let report = train(&mut model, data, &schedule)?;
        log::info!("iteration {iteration}: network trained, final accuracy {:.3}", report.final_accuracy);
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationConfig {
    pub iterations: usize,
    pub forest: ForestConfig,
    pub threshold: f64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            iterations: 4,
            forest: ForestConfig::default(),
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub feature_dim: usize,
    /// Pool labels against hidden truth, when every pool sample has one.
    pub agreement: Option<MetricsReport>,
    pub label_counts: [usize; 3],
}

fn one_hot(c: Class) -> ClassProbs {
    let mut a = [0.0; 3];
    a[c.index()] = 1.0;
    ClassProbs::from_slice(&a).expect("one-hot is a distribution")
}

fn rows(samples: &[PreparedSample], curves: Option<&[CurveFeatures]>) -> Vec<Vec<f64>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut f = s.metadata.features();
            if let Some(c) = curves {
                f.extend(c[i].to_vec());
            }
            f
        })
        .collect()
}

fn curve_table<M: CurveModel>(model: &M, samples: &[PreparedSample]) -> Result<Vec<CurveFeatures>, AnnotateError> {
    samples
        .par_iter()
        .map(|s| curve_features(&model.curve(s)?))
        .collect()
}

/// One round: forests on the seed set, labels for the pool, a model trained on
/// those labels.
pub fn run_iteration<T: CurveTrainer>(
    seed_set: &[PreparedSample],
    pool: &[PreparedSample],
    prev_model: Option<&T::Model>,
    trainer: &T,
    config: &AnnotationConfig,
    iteration: usize,
) -> Result<(Vec<Class>, T::Model, IterationReport), AnnotateError> {
    let seed_labels: Vec<Class> = seed_set
        .iter()
        .map(|s| s.truth.expect("seed samples carry manual labels"))
        .collect();
    for c in Class::ALL {
        if !seed_labels.contains(&c) {
            return Err(AnnotateError::MissingClass(c));
        }
    }
    let (seed_curves, pool_curves) = match prev_model {
        Some(m) => (Some(curve_table(m, seed_set)?), Some(curve_table(m, pool)?)),
        None => (None, None),
    };
    let x_seed = rows(seed_set, seed_curves.as_deref());
    let x_pool = rows(pool, pool_curves.as_deref());
    let feature_dim = x_seed[0].len();

    let mut forest_cfg = config.forest.clone();
    forest_cfg.seed = config.forest.seed.wrapping_add(1000 * iteration as u64);
    let is_a: Vec<bool> = seed_labels.iter().map(|&c| c == Class::Awesome).collect();
    let forest_a = train_forest(&x_seed, &is_a, &forest_cfg)?;
    forest_cfg.seed = forest_cfg.seed.wrapping_add(1);
    let is_i: Vec<bool> = seed_labels.iter().map(|&c| c == Class::Inferior).collect();
    let forest_i = train_forest(&x_seed, &is_i, &forest_cfg)?;

    let labels = x_pool
        .iter()
        .map(|x| Ok(assign_label(forest_predict(&forest_a, x)?, forest_predict(&forest_i, x)?, config.threshold)))
        .collect::<Result<Vec<_>, AnnotateError>>()?;

    let mut label_counts = [0; 3];
    for l in &labels {
        label_counts[l.index()] += 1;
    }
    let agreement = if pool.iter().all(|s| s.truth.is_some()) && !pool.is_empty() {
        let preds: Vec<ClassProbs> = labels.iter().map(|&l| one_hot(l)).collect();
        let truth: Vec<Class> = pool.iter().map(|s| s.truth.unwrap()).collect();
        Some(metrics(&preds, &truth)?)
    } else {
        None
    };

    let data: Vec<TrainingExample> = pool
        .iter()
        .zip(&labels)
        .map(|(s, &label)| TrainingExample {
            id: s.id.clone(),
            cqt: s.cqt.clone(),
            timbre: s.timbre.clone(),
            label,
        })
        .collect();
    let model = trainer.fit(&data, iteration, prev_model)?;
    Ok((
        labels,
        model,
        IterationReport {
            iteration,
            feature_dim,
            agreement,
            label_counts,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct LoopOutcome<M> {
    /// Pool labels after each iteration.
    pub snapshots: Vec<Vec<Class>>,
    pub reports: Vec<IterationReport>,
    pub final_model: M,
}

/// Runs `config.iterations` rounds, threading each round's model into the next.
/// `on_iteration` sees every snapshot as it is produced.
pub fn run_loop<T: CurveTrainer>(
    seed_set: &[PreparedSample],
    pool: &[PreparedSample],
    trainer: &T,
    config: &AnnotationConfig,
    mut on_iteration: impl FnMut(&IterationReport, &[Class], &T::Model) -> Result<(), AnnotateError>,
) -> Result<LoopOutcome<T::Model>, AnnotateError> {
    let mut prev: Option<T::Model> = None;
    let mut snapshots = Vec::new();
    let mut reports = Vec::new();
    for iteration in 1..=config.iterations {
        let (labels, model, report) = run_iteration(seed_set, pool, prev.as_ref(), trainer, config, iteration)?;
        if let Some(a) = &report.agreement {
            log::info!("iteration {iteration}: agreement {:.3}", a.accuracy);
        }
        on_iteration(&report, &labels, &model)?;
        snapshots.push(labels);
        reports.push(report);
        prev = Some(model);
    }
    Ok(LoopOutcome {
        snapshots,
        reports,
        final_model: prev.expect("at least one iteration"),
    })
}

/// Generator settings for the vocal-proxy corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_seed: usize,
    pub n_pool: usize,
    pub clip_seconds: f64,
    pub notes_per_clip: usize,
    /// Pitch-error standard deviation per class (A, M, I), in cents.
    pub pitch_sigma_cents: [f64; 3],
    /// Noise floor per class relative to the tone RMS, in dB.
    pub noise_db: [f64; 3],
    /// Depth of random amplitude modulation per class.
    pub tremolo_depth: [f64; 3],
    /// Standard deviation of the metadata noise on each score.
    pub score_noise: f64,
    /// Weight of the popularity confounder in log-likes and log-comments.
    pub confounder_weight: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_seed: 90,
            n_pool: 900,
            clip_seconds: 10.24,
            notes_per_clip: 8,
            pitch_sigma_cents: [5.0, 40.0, 110.0],
            noise_db: [-45.0, -30.0, -18.0],
            tremolo_depth: [0.05, 0.25, 0.6],
            score_noise: 14.0,
            confounder_weight: 1.2,
        }
    }
}

/// Everything needed to render one synthetic song.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub id: String,
    pub class: Class,
    pub metadata: MetadataRecord,
    pub render_seed: u64,
    /// Pitch-error scale drawn for this song, in cents.
    pub pitch_sigma_cents: f64,
    /// Nominal MIDI note and the applied pitch error of each note.
    pub notes: Vec<(u8, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub seed_set: Vec<SynthSample>,
    pub pool: Vec<SynthSample>,
}

fn class_latent(c: Class) -> f64 {
    match c {
        Class::Awesome => 1.0,
        Class::Mediocre => 0.0,
        Class::Inferior => -1.0,
    }
}

fn synth_samples(prefix: &str, n: usize, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<SynthSample> {
    let mut classes: Vec<Class> = (0..n).map(|i| Class::ALL[i % 3]).collect();
    classes.shuffle(rng);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    classes
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            let q = class_latent(class) + 0.35 * unit.sample(rng);
            let confounder = unit.sample(rng);
            let score = |rng: &mut ChaCha8Rng, slope: f64| {
                (65.0 + slope * q + config.score_noise * unit.sample(rng)).clamp(0.0, 100.0)
            };
            let intonation_score = score(rng, 12.0);
            let rhythm_score = score(rng, 8.0);
            let count = |rng: &mut ChaCha8Rng, base: f64, slope: f64| {
                (base + slope * q + config.confounder_weight * confounder + 0.3 * unit.sample(rng))
                    .exp()
                    .round() as u64
            };
            let likes = count(rng, 3.0, 0.35);
            let comments = count(rng, 1.5, 0.25);
            let sigma = config.pitch_sigma_cents[class.index()] * rng.gen_range(0.75..1.25);
            let notes = (0..config.notes_per_clip)
                .map(|_| (rng.gen_range(45u8..=69), sigma * unit.sample(rng)))
                .collect();
            SynthSample {
                id: format!("{prefix}-{:04}", i + 1),
                class,
                metadata: MetadataRecord {
                    intonation_score,
                    rhythm_score,
                    likes,
                    comments,
                    popularity_confounder: Some(confounder),
                },
                render_seed: rng.gen(),
                pitch_sigma_cents: sigma,
                notes,
            }
        })
        .collect()
}

/// Draws a seed set and a pool with hidden labels, roughly class-balanced.
pub fn synth_corpus(master_seed: u64, config: &SynthConfig) -> Result<SynthCorpus, AnnotateError> {
    if config.n_seed < 3 || config.n_pool < 3 {
        return Err(AnnotateError::TooFewPerClass(1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let seed_set = synth_samples("seed", config.n_seed, config, &mut rng);
    let pool = synth_samples("pool", config.n_pool, config, &mut rng);
    Ok(SynthCorpus {
        config: config.clone(),
        seed_set,
        pool,
    })
}

const HARMONICS: usize = 6;

/// Renders a song: harmonic notes with the drawn pitch errors, random amplitude
/// modulation and a white-noise floor, peak-normalized to a random level.
pub fn render(sample: &SynthSample, config: &SynthConfig) -> Result<AudioClip, AnnotateError> {
    let sr = TARGET_RATE as f64;
    let n = (config.clip_seconds * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(sample.render_seed);
    let class = sample.class.index();
    let note_len = n / sample.notes.len().max(1);

    // slow random modulation: a few sinusoids between 2 and 8 Hz
    let mods: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.gen_range(2.0..8.0), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.5..1.0)))
        .collect();
    let mod_norm: f64 = mods.iter().map(|m| m.2).sum();
    let depth = config.tremolo_depth[class];

    let mut tone = vec![0.0; n];
    let mut phase = [0.0f64; HARMONICS];
    for (k, &(midi, cents)) in sample.notes.iter().enumerate() {
        let f0 = 440.0 * 2f64.powf((midi as f64 - 69.0) / 12.0 + cents / 1200.0);
        let start = k * note_len;
        let end = if k + 1 == sample.notes.len() { n } else { start + note_len };
        let len = end - start;
        for (j, slot) in tone[start..end].iter_mut().enumerate() {
            let t = (start + j) as f64 / sr;
            let edge = (j.min(len - 1 - j) as f64 / (0.02 * sr)).min(1.0);
            let m = mods.iter().map(|&(f, ph, a)| a * (2.0 * PI * f * t + ph).sin()).sum::<f64>() / mod_norm;
            let env = edge * (1.0 + depth * m).max(0.0);
            let mut v = 0.0;
            for (h, p) in phase.iter_mut().enumerate() {
                let fh = f0 * (h + 1) as f64;
                if fh < 0.45 * sr {
                    v += (*p).sin() / (h + 1) as f64;
                }
                *p = (*p + 2.0 * PI * fh / sr) % (2.0 * PI);
            }
            *slot = env * v;
        }
    }
    let rms = (tone.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let noise_rms = rms * 10f64.powf(config.noise_db[class] / 20.0);
    let noise = Normal::new(0.0, noise_rms).expect("valid normal");
    let mut mix: Vec<f64> = tone.iter().map(|v| v + noise.sample(&mut rng)).collect();
    let peak = mix.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    let level = rng.gen_range(0.3..0.9);
    mix.iter_mut().for_each(|v| *v *= level / peak);
    Ok(AudioClip::new(mix, TARGET_RATE, sample.id.clone())?)
}

/// A constant curve built from a fixed probability triple, handy for tests and
/// for songs whose curves are supplied externally.
pub fn constant_curve(probs: ClassProbs, points: usize) -> EvaluationCurve {
    EvaluationCurve::new(
        (0..points)
            .map(|i| CurvePoint {
                start_frame: i * crate::model::CURVE_HOP_FRAMES,
                probs,
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_rule_cases() {
        assert_eq!(assign_label(0.9, 0.1, 0.5), Class::Awesome);
        assert_eq!(assign_label(0.2, 0.3, 0.5), Class::Mediocre);
        assert_eq!(assign_label(0.8, 0.8, 0.5), Class::Awesome);
        assert_eq!(assign_label(0.6, 0.7, 0.5), Class::Inferior);
        assert_eq!(assign_label(0.5, 0.1, 0.5), Class::Awesome);
    }

    #[test]
    fn single_point_curve_features() {
        let p = ClassProbs::new(0.2, 0.5, 0.3).unwrap();
        let f = curve_features(&constant_curve(p, 1)).unwrap();
        assert_eq!(f.stats[1], [0.5, 0.0, 0.5, 0.5]);
        let f3 = curve_features(&constant_curve(p, 3)).unwrap();
        assert_eq!(f3.stats[0][1], 0.0);
        assert_eq!(f3.stats[0][2], f3.stats[0][3]);
        assert!(matches!(curve_features(&EvaluationCurve::new(vec![])), Err(AnnotateError::EmptyCurve)));
    }

    #[test]
    fn label_source_display() {
        assert_eq!(LabelSource::Manual.to_string(), "manual");
        assert_eq!(LabelSource::Automatic(3).to_string(), "automatic@3");
    }
}
