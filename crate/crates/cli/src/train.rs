use std::collections::BTreeMap;
use std::fs;

use anyhow::{Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tgcritic_core::model::{Class, ModelConfig, TgCritic};
use tgcritic_core::train::{self as core_train, write_log_csv, MetricsReport, Strategy, TrainReport, TrainSchedule, TrainingExample};

use crate::cache::FeatureCache;
use crate::extract::{extract_strict, write_json};
use crate::manifest::Manifest;
use crate::{input_error, TrainArgs};

#[derive(Debug, Serialize)]
struct TrainMetrics<'a> {
    seed: u64,
    config_digest: String,
    schedule: &'a TrainSchedule,
    param_count: usize,
    train_samples: usize,
    validation_samples: usize,
    /// "holdout", or "train" when the set is too small to split.
    validation_source: &'static str,
    train: MetricsReport,
    validation: MetricsReport,
    report: &'a TrainReport,
}

/// Stratified holdout: `fraction` of each class (rounded down), shuffled by `seed`.
/// Returns `(train, validation)` indices, each sorted.
pub fn split(labels: &[Class], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b11_u64);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in Class::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * fraction).floor() as usize;
        // keep at least one training example per class
        let k = k.min(idx.len().saturating_sub(1));
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

pub fn checkpoint_metadata(seed: u64, cfg: &ModelConfig, extra: &[(&str, String)]) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("seed".to_string(), seed.to_string());
    m.insert("config_digest".to_string(), cfg.digest());
    for (k, v) in extra {
        m.insert(k.to_string(), v.clone());
    }
    m
}

pub fn run(args: &TrainArgs) -> Result<()> {
    if !(0.0..1.0).contains(&args.val_fraction) {
        return Err(input_error("--val-fraction must be in [0, 1)"));
    }
    let cfg = args.model.resolve(args.seed)?;
    let mut schedule = TrainSchedule::scaled(args.strategy, args.seed, args.scale);
    schedule.target_accuracy = args.target_accuracy;
    schedule.validate().map_err(|e| input_error(e.to_string()))?;

    let manifest = Manifest::read(&args.manifest)?;
    let labels = manifest.labels()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let cache = FeatureCache::new(args.out.join("cache"))?;
    let samples = extract_strict(&manifest, &cache, args.force).map_err(|e| input_error(format!("{e:#}")))?;
    let examples: Vec<TrainingExample> = samples
        .into_iter()
        .zip(&labels)
        .map(|(s, &label)| TrainingExample {
            id: s.id,
            cqt: s.cqt,
            timbre: s.timbre,
            label,
        })
        .collect();

    let (train_idx, val_idx) = split(&labels, args.val_fraction, args.seed);
    let train_set: Vec<TrainingExample> = train_idx.iter().map(|&i| examples[i].clone()).collect();
    let (val_set, source) = if val_idx.is_empty() {
        (train_set.clone(), "train")
    } else {
        (val_idx.iter().map(|&i| examples[i].clone()).collect(), "holdout")
    };

    let mut model = TgCritic::new(cfg.clone())?;
    log::info!(
        "training {} parameters on {} songs ({:?}, scale {})",
        model.param_count(),
        train_set.len(),
        args.strategy,
        args.scale
    );
    let report = core_train::train(&mut model, &train_set, &schedule)?;
    let evaluate = |set: &[TrainingExample]| -> Result<MetricsReport> {
        let preds = core_train::predict_center(&model, set)?;
        let truth: Vec<Class> = set.iter().map(|e| e.label).collect();
        Ok(core_train::metrics(&preds, &truth)?)
    };
    let metrics = TrainMetrics {
        seed: args.seed,
        config_digest: cfg.digest(),
        schedule: &schedule,
        param_count: model.param_count(),
        train_samples: train_set.len(),
        validation_samples: val_set.len(),
        validation_source: source,
        train: evaluate(&train_set)?,
        validation: evaluate(&val_set)?,
        report: &report,
    };

    let strategy = match args.strategy {
        Strategy::OneStep => "one_step",
        Strategy::TwoStep => "two_step",
    }
    .to_string();
    model.save(
        args.out.join("model.json"),
        checkpoint_metadata(
            args.seed,
            &cfg,
            &[("strategy", strategy), ("scale_factor", args.scale.to_string())],
        ),
    )?;
    write_json(
        &args.out.join("model_config.json"),
        &serde_json::json!({ "seed": args.seed, "config_digest": cfg.digest(), "config": cfg }),
    )?;
    write_log_csv(args.out.join("train_log.csv"), &report.log)?;
    write_json(&args.out.join("metrics.json"), &metrics)?;
    println!(
        "trained: final accuracy {:.3}, validation accuracy {:.3} ({source}), {} log rows",
        report.final_accuracy,
        metrics.validation.accuracy,
        report.log.len()
    );
    Ok(())
}
