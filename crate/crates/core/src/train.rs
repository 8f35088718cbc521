//! One-step and two-step training, evaluation metrics, the weighted score and
//! Pearson correlation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cqt::CqtMatrix;
use crate::model::{Class, ClassProbs, ModelError, TgCritic, HEAD_PREFIX, HR_PREFIX, TIMBRE_PREFIX};
use crate::nn::{Adam, AdamConfig, Gradients, NnError, ParamStore, Tape, Tensor};
use crate::timbre::TimbreVector;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("example {id} has {frames} frames, fewer than one {window}-frame window")]
    ShortExample { id: String, frames: usize, window: usize },
    #[error("training diverged in {phase} epoch {epoch} batch {batch}; weights rolled back to the end of epoch {restored_epoch}")]
    Diverged {
        phase: String,
        epoch: usize,
        batch: usize,
        restored_epoch: usize,
    },
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {0} values")]
    TooFew(usize),
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    OneStep,
    TwoStep,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "one_step" => Ok(Strategy::OneStep),
            "two_step" => Ok(Strategy::TwoStep),
            other => Err(format!("unknown strategy {other:?} (expected one_step or two_step)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub strategy: Strategy,
    /// Unscaled epochs per step.
    pub epochs: Vec<usize>,
    /// Learning rate per step.
    pub learning_rates: Vec<f64>,
    /// Unscaled batches per epoch.
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Divisor applied to epochs and batches per epoch.
    pub scale_factor: usize,
    /// Stop a step once full-set training accuracy reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

impl TrainSchedule {
    /// The full regimen: 200 epochs (or 100 + 100) of 500 batches of 32.
    pub fn full(strategy: Strategy, seed: u64) -> Self {
        let (epochs, learning_rates) = match strategy {
            Strategy::OneStep => (vec![200], vec![1e-4]),
            Strategy::TwoStep => (vec![100, 100], vec![1e-4, 5e-5]),
        };
        Self {
            strategy,
            epochs,
            learning_rates,
            batches_per_epoch: 500,
            batch_size: 32,
            seed,
            scale_factor: 1,
            target_accuracy: None,
        }
    }

    /// Full regimen divided by `scale_factor` (10 by default at desk scale).
    pub fn scaled(strategy: Strategy, seed: u64, scale_factor: usize) -> Self {
        Self {
            scale_factor,
            ..Self::full(strategy, seed)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let steps = match self.strategy {
            Strategy::OneStep => 1,
            Strategy::TwoStep => 2,
        };
        let bad = |m: String| Err(TrainError::Schedule(m));
        if self.epochs.len() != steps || self.learning_rates.len() != steps {
            return bad(format!("{:?} needs {steps} epoch counts and learning rates", self.strategy));
        }
        if self.scale_factor == 0 {
            return bad("scale factor must be at least 1".into());
        }
        if self.epochs.contains(&0) || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, batches and batch size must be positive".into());
        }
        if self.learning_rates.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        Ok(())
    }

    /// Epochs of step `i` after scaling (at least one).
    pub fn scaled_epochs(&self, i: usize) -> usize {
        (self.epochs[i] / self.scale_factor).max(1)
    }

    pub fn scaled_batches(&self) -> usize {
        (self.batches_per_epoch / self.scale_factor).max(1)
    }
}

/// One labeled song: its log-CQT (any length of at least one window), timbre input and label.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: String,
    pub cqt: CqtMatrix,
    pub timbre: TimbreVector,
    pub label: Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    /// Optimizer steps taken so far in this phase.
    pub step: u64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// Loss of the first sample of the first batch.
    pub first_loss: f64,
    /// Full-set accuracy at the end (central crops).
    pub final_accuracy: f64,
    pub stopped_early: bool,
    /// High-Resolution Branch digest before and after step 2 (two-step only).
    pub hr_digest_before_step2: Option<String>,
    pub hr_digest_after_step2: Option<String>,
    /// Parameters holding optimizer state in step 2 (two-step only).
    pub step2_tracked: Option<Vec<String>>,
}

pub fn write_log_csv(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Joint,
    HrOnly,
    TimbreHead,
}

impl Phase {
    fn tag(self) -> &'static str {
        match self {
            Phase::Joint => "one_step",
            Phase::HrOnly => "two_step_1",
            Phase::TimbreHead => "two_step_2",
        }
    }
}

/// Start frame of the crop used for evaluation.
pub fn center_start(frames: usize, window: usize) -> usize {
    frames.saturating_sub(window) / 2
}

fn check_data(model: &TgCritic, data: &[TrainingExample]) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let window = model.config().hr.window_frames;
    if let Some(e) = data.iter().find(|e| e.cqt.frames() < window) {
        return Err(TrainError::ShortExample {
            id: e.id.clone(),
            frames: e.cqt.frames(),
            window,
        });
    }
    Ok(())
}

/// Loss, correctness and gradients for one cropped example.
fn sample_grads(
    model: &TgCritic,
    phase: Phase,
    ex: &TrainingExample,
    start: usize,
) -> Result<(f64, bool, Gradients), TrainError> {
    let x = model.window_tensor(&ex.cqt, start)?;
    let mut tape = Tape::new(model.store());
    let xv = tape.input(x);
    let hr = model.hr_forward(&mut tape, xv)?;
    let p = if phase == Phase::HrOnly {
        model.aux_classify(&mut tape, hr)?
    } else {
        let v = tape.input(Tensor::vector(ex.timbre.values().to_vec()));
        let tb = model.timbre_forward(&mut tape, v)?;
        model.classify(&mut tape, hr, tb)?
    };
    let probs = tape.value(p).data();
    if probs.iter().any(|v| !v.is_finite()) {
        // reported as a non-finite loss so the caller rolls back
        return Ok((f64::NAN, false, Gradients::default()));
    }
    let y = ex.label.index();
    // argmax with ties to the earlier class
    let correct = (0..probs.len()).all(|i| i == y || probs[i] < probs[y] || (probs[i] == probs[y] && i > y));
    let loss = tape.cross_entropy(p, y)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, correct, grads))
}

/// Class-balanced draws: a class uniformly among those present, then an example
/// of that class, then a crop start.
fn draw_batch(
    rng: &mut ChaCha8Rng,
    by_class: &[Vec<usize>],
    data: &[TrainingExample],
    window: usize,
    size: usize,
) -> Vec<(usize, usize)> {
    (0..size)
        .map(|_| {
            let members = by_class.choose(rng).expect("at least one class");
            let idx = *members.choose(rng).expect("non-empty class");
            let span = data[idx].cqt.frames() - window;
            let start = if span > 0 { rng.gen_range(0..=span) } else { 0 };
            (idx, start)
        })
        .collect()
}

/// Full-set accuracy with central crops, using the phase's classifier.
fn phase_accuracy(model: &TgCritic, phase: Phase, data: &[TrainingExample]) -> Result<f64, TrainError> {
    let window = model.config().hr.window_frames;
    let correct = data
        .par_iter()
        .map(|ex| sample_grads(model, phase, ex, center_start(ex.cqt.frames(), window)).map(|r| r.1))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / data.len() as f64)
}

fn run_phase(
    model: &mut TgCritic,
    data: &[TrainingExample],
    schedule: &TrainSchedule,
    phase: Phase,
    step_index: usize,
    report: &mut TrainReport,
) -> Result<(), TrainError> {
    let window = model.config().hr.window_frames;
    let mut by_class: Vec<Vec<usize>> = Class::ALL
        .iter()
        .map(|&c| (0..data.len()).filter(|&i| data[i].label == c).collect())
        .collect();
    by_class.retain(|v| !v.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ ((step_index as u64 + 1) << 32));
    let mut adam = Adam::new(model.store(), AdamConfig::with_lr(schedule.learning_rates[step_index]));
    if phase == Phase::TimbreHead {
        let names = adam.tracked().iter().map(|&id| model.store().get(id).name.clone()).collect();
        report.step2_tracked = Some(names);
    }
    let mut last_good: ParamStore = model.store().clone();
    let batches = schedule.scaled_batches();
    for epoch in 1..=schedule.scaled_epochs(step_index) {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in 1..=batches {
            let draws = draw_batch(&mut rng, &by_class, data, window, schedule.batch_size);
            let results = {
                let m: &TgCritic = model;
                draws
                    .par_iter()
                    .map(|&(i, start)| sample_grads(m, phase, &data[i], start))
                    .collect::<Result<Vec<_>, _>>()?
            };
            if report.log.is_empty() && epoch == 1 && batch == 1 && step_index == 0 {
                report.first_loss = results[0].0;
            }
            let diverged = results.iter().any(|r| !r.0.is_finite());
            let store = model.store_mut();
            store.zero_grad();
            let scale = 1.0 / results.len() as f64;
            for (loss, ok, grads) in &results {
                loss_sum += loss;
                correct += *ok as usize;
                seen += 1;
                store.accumulate(grads, scale);
            }
            let stepped = if diverged { None } else { Some(adam.step(store)) };
            if !matches!(stepped, Some(Ok(()))) {
                if let Some(Err(e)) = stepped {
                    if !matches!(e, NnError::NonFiniteGradient { .. }) {
                        return Err(e.into());
                    }
                }
                *model.store_mut() = last_good;
                return Err(TrainError::Diverged {
                    phase: phase.tag().into(),
                    epoch,
                    batch,
                    restored_epoch: epoch - 1,
                });
            }
        }
        let entry = EpochLog {
            phase: phase.tag().into(),
            epoch,
            step: adam.steps_taken(),
            mean_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
        };
        log::info!(
            "{} epoch {} loss {:.4} acc {:.3}",
            entry.phase,
            entry.epoch,
            entry.mean_loss,
            entry.train_accuracy
        );
        let running = entry.train_accuracy;
        report.log.push(entry);
        last_good = model.store().clone();
        if let Some(target) = schedule.target_accuracy {
            if running >= target && phase_accuracy(model, phase, data)? >= target {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(())
}

/// Trains every parameter jointly.
pub fn train_one_step(
    model: &mut TgCritic,
    data: &[TrainingExample],
    schedule: &TrainSchedule,
) -> Result<TrainReport, TrainError> {
    schedule.validate()?;
    if schedule.strategy != Strategy::OneStep {
        return Err(TrainError::Schedule("expected a one-step schedule".into()));
    }
    check_data(model, data)?;
    let mut report = TrainReport::default();
    model.store_mut().set_all_trainable(true);
    run_phase(model, data, schedule, Phase::Joint, 0, &mut report)?;
    report.final_accuracy = accuracy(model, data)?;
    Ok(report)
}

/// Step 1: High-Resolution Branch with a temporary head. Step 2: that branch
/// frozen, Timbre Branch and fusion head trained at the second learning rate.
pub fn train_two_step(
    model: &mut TgCritic,
    data: &[TrainingExample],
    schedule: &TrainSchedule,
) -> Result<TrainReport, TrainError> {
    schedule.validate()?;
    if schedule.strategy != Strategy::TwoStep {
        return Err(TrainError::Schedule("expected a two-step schedule".into()));
    }
    check_data(model, data)?;
    let mut report = TrainReport::default();
    model.attach_aux_head(schedule.seed ^ 0xa0a0)?;
    {
        let store = model.store_mut();
        store.set_all_trainable(false);
        store.set_trainable(HR_PREFIX, true);
        store.set_trainable("aux.", true);
    }
    let step1 = run_phase(model, data, schedule, Phase::HrOnly, 0, &mut report);
    model.detach_aux_head();
    step1?;

    {
        let store = model.store_mut();
        store.set_all_trainable(false);
        store.set_trainable(TIMBRE_PREFIX, true);
        store.set_trainable(HEAD_PREFIX, true);
    }
    report.hr_digest_before_step2 = Some(model.store().digest(HR_PREFIX));
    let step2 = run_phase(model, data, schedule, Phase::TimbreHead, 1, &mut report);
    report.hr_digest_after_step2 = Some(model.store().digest(HR_PREFIX));
    model.store_mut().set_all_trainable(true);
    step2?;
    report.final_accuracy = accuracy(model, data)?;
    Ok(report)
}

pub fn train(model: &mut TgCritic, data: &[TrainingExample], schedule: &TrainSchedule) -> Result<TrainReport, TrainError> {
    match schedule.strategy {
        Strategy::OneStep => train_one_step(model, data, schedule),
        Strategy::TwoStep => train_two_step(model, data, schedule),
    }
}

/// Full-network probabilities on the central crop of each example.
pub fn predict_center(model: &TgCritic, data: &[TrainingExample]) -> Result<Vec<ClassProbs>, TrainError> {
    let window = model.config().hr.window_frames;
    data.par_iter()
        .map(|ex| {
            let x = model.window_tensor(&ex.cqt, center_start(ex.cqt.frames(), window))?;
            Ok(model.predict(&x, &Tensor::vector(ex.timbre.values().to_vec()))?)
        })
        .collect()
}

pub fn accuracy(model: &TgCritic, data: &[TrainingExample]) -> Result<f64, TrainError> {
    let preds = predict_center(model, data)?;
    let labels: Vec<Class> = data.iter().map(|e| e.label).collect();
    Ok(metrics(&preds, &labels)?.accuracy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Indexed A, M, I.
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub accuracy: f64,
    /// `confusion[truth][predicted]`
    pub confusion: [[usize; 3]; 3],
    pub total: usize,
    /// Classes whose precision had no predictions to divide by (reported as 0).
    pub undefined_precision: Vec<Class>,
    /// Classes with no support (recall reported as 0).
    pub undefined_recall: Vec<Class>,
}

/// Per-class precision/recall, accuracy and confusion under the argmax rule.
pub fn metrics(predictions: &[ClassProbs], labels: &[Class]) -> Result<MetricsReport, TrainError> {
    if predictions.len() != labels.len() {
        return Err(TrainError::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut confusion = [[0usize; 3]; 3];
    for (p, &t) in predictions.iter().zip(labels) {
        confusion[t.index()][p.argmax().index()] += 1;
    }
    let mut report = MetricsReport {
        precision: [0.0; 3],
        recall: [0.0; 3],
        accuracy: (0..3).map(|i| confusion[i][i]).sum::<usize>() as f64 / labels.len() as f64,
        confusion,
        total: labels.len(),
        undefined_precision: Vec::new(),
        undefined_recall: Vec::new(),
    };
    for c in Class::ALL {
        let i = c.index();
        let predicted: usize = (0..3).map(|t| confusion[t][i]).sum();
        let support: usize = confusion[i].iter().sum();
        if predicted == 0 {
            report.undefined_precision.push(c);
        } else {
            report.precision[i] = confusion[i][i] as f64 / predicted as f64;
        }
        if support == 0 {
            report.undefined_recall.push(c);
        } else {
            report.recall[i] = confusion[i][i] as f64 / support as f64;
        }
    }
    Ok(report)
}

/// `P_A * 1.0 + P_M * 0.5 + P_I * 0.0`.
pub fn weighted_score(p: &ClassProbs) -> Result<f64, TrainError> {
    if !p.is_valid() {
        return Err(ModelError::InvalidProbs(p.as_array()).into());
    }
    Ok(p.p_awesome + 0.5 * p.p_mediocre)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, TrainError> {
    if x.len() != y.len() {
        return Err(TrainError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(TrainError::TooFew(2));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(TrainError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
