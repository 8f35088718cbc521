use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tgcritic_core::annotate::{
    render, run_loop, synth_corpus, AnnotationConfig, IterationReport, LabelSource, NetworkTrainer, SynthConfig,
};
use tgcritic_core::audio::write_wav;
use tgcritic_core::forest::ForestConfig;
use tgcritic_core::model::Class;
use tgcritic_core::train::TrainSchedule;

use crate::cache::FeatureCache;
use crate::extract::{extract_strict, write_json};
use crate::manifest::{write_jsonl, Manifest, ManifestEntry};
use crate::train::checkpoint_metadata;
use crate::{input_error, AnnotateArgs};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRow {
    pub sample_id: String,
    pub label: Class,
}

#[derive(Debug, Serialize)]
struct AgreementRow {
    iteration: usize,
    feature_dim: usize,
    accuracy: Option<f64>,
    precision_a: Option<f64>,
    recall_a: Option<f64>,
    precision_m: Option<f64>,
    recall_m: Option<f64>,
    precision_i: Option<f64>,
    recall_i: Option<f64>,
    count_a: usize,
    count_m: usize,
    count_i: usize,
}

impl From<&IterationReport> for AgreementRow {
    fn from(r: &IterationReport) -> Self {
        let m = r.agreement.as_ref();
        let p = |c: usize| m.map(|m| m.precision[c]);
        let rc = |c: usize| m.map(|m| m.recall[c]);
        Self {
            iteration: r.iteration,
            feature_dim: r.feature_dim,
            accuracy: m.map(|m| m.accuracy),
            precision_a: p(0),
            recall_a: rc(0),
            precision_m: p(1),
            recall_m: rc(1),
            precision_i: p(2),
            recall_i: rc(2),
            count_a: r.label_counts[0],
            count_m: r.label_counts[1],
            count_i: r.label_counts[2],
        }
    }
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    seed: u64,
    config_digest: String,
    params_digest: &'a str,
    iterations: usize,
    schedule: &'a TrainSchedule,
    annotation: &'a AnnotationConfig,
    reports: &'a [IterationReport],
}

/// Renders the synthetic corpus to WAV files plus seed, pool and truth manifests.
fn write_synthetic(dir: &Path, seed: u64, cfg: &SynthConfig) -> Result<(PathBuf, PathBuf, PathBuf)> {
    let corpus = synth_corpus(seed, cfg)?;
    let audio_dir = dir.join("audio");
    fs::create_dir_all(&audio_dir).with_context(|| format!("creating {}", audio_dir.display()))?;
    corpus
        .seed_set
        .par_iter()
        .chain(corpus.pool.par_iter())
        .try_for_each(|s| -> Result<()> {
            let path = audio_dir.join(format!("{}.wav", s.id));
            write_wav(&render(s, &corpus.config)?, &path)?;
            Ok(())
        })?;
    let entry = |s: &tgcritic_core::annotate::SynthSample, labeled: bool| ManifestEntry {
        sample_id: s.id.clone(),
        audio_path: PathBuf::from("audio").join(format!("{}.wav", s.id)),
        label: labeled.then_some(s.class),
        label_source: labeled.then(|| LabelSource::Manual.to_string()),
        metadata: Some(s.metadata),
    };
    let seed_path = dir.join("seed.jsonl");
    let pool_path = dir.join("pool.jsonl");
    let truth_path = dir.join("pool_truth.jsonl");
    write_jsonl(&seed_path, &corpus.seed_set.iter().map(|s| entry(s, true)).collect::<Vec<_>>())?;
    write_jsonl(&pool_path, &corpus.pool.iter().map(|s| entry(s, false)).collect::<Vec<_>>())?;
    let truth: Vec<TruthRow> = corpus
        .pool
        .iter()
        .map(|s| TruthRow {
            sample_id: s.id.clone(),
            label: s.class,
        })
        .collect();
    write_jsonl(&truth_path, &truth)?;
    write_json(&dir.join("corpus.json"), &serde_json::json!({ "seed": seed, "config": corpus.config }))?;
    Ok((seed_path, pool_path, truth_path))
}

fn read_truth(path: &Path) -> Result<HashMap<String, Class>> {
    let text = fs::read_to_string(path).map_err(|e| input_error(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let row: TruthRow = serde_json::from_str(l).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
            Ok((row.sample_id, row.label))
        })
        .collect()
}

fn require_metadata(m: &Manifest) -> Result<()> {
    match m.entries.iter().find(|e| e.metadata.is_none()) {
        Some(e) => Err(input_error(format!("sample {:?} has no metadata", e.sample_id))),
        None => Ok(()),
    }
}

pub fn run(args: &AnnotateArgs) -> Result<()> {
    if args.iterations == 0 {
        return Err(input_error("--iterations must be at least 1"));
    }
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(input_error("--threshold must be in [0, 1]"));
    }
    let cfg = args.model.resolve(args.seed)?;
    let mut schedule = TrainSchedule::scaled(args.strategy, args.seed, args.scale);
    schedule.validate().map_err(|e| input_error(e.to_string()))?;
    schedule.target_accuracy = None;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let (seed_path, pool_path, truth_path) = if args.synthetic {
        let synth = SynthConfig {
            n_seed: args.n_seed,
            n_pool: args.n_pool,
            ..SynthConfig::default()
        };
        log::info!("rendering {} + {} synthetic songs", synth.n_seed, synth.n_pool);
        let (s, p, t) = write_synthetic(&args.out.join("synthetic"), args.seed, &synth)
            .map_err(|e| input_error(format!("{e:#}")))?;
        (s, p, Some(t))
    } else {
        (
            args.seed_manifest.clone().expect("required by the parser"),
            args.pool_manifest.clone().expect("required by the parser"),
            args.truth.clone(),
        )
    };
    let seed_manifest = Manifest::read(&seed_path)?;
    let pool_manifest = Manifest::read(&pool_path)?;
    seed_manifest.labels()?;
    require_metadata(&seed_manifest)?;
    require_metadata(&pool_manifest)?;
    let truth = truth_path.as_deref().map(read_truth).transpose()?;

    let cache = FeatureCache::new(args.out.join("cache"))?;
    log::info!("extracting features");
    let seed_set = extract_strict(&seed_manifest, &cache, args.force).map_err(|e| input_error(format!("{e:#}")))?;
    let mut pool = extract_strict(&pool_manifest, &cache, args.force).map_err(|e| input_error(format!("{e:#}")))?;
    for s in &mut pool {
        // pool labels are never used for training; only compared against
        s.truth = truth.as_ref().and_then(|t| t.get(&s.id).copied());
    }

    let annotation = AnnotationConfig {
        iterations: args.iterations,
        forest: ForestConfig {
            seed: args.seed,
            ..ForestConfig::default()
        },
        threshold: args.threshold,
    };
    let trainer = NetworkTrainer {
        model: cfg.clone(),
        schedule: schedule.clone(),
        warm_start: !args.cold_start,
    };
    let snap_dir = args.out.join("snapshots");
    let model_dir = args.out.join("models");
    fs::create_dir_all(&snap_dir)?;
    fs::create_dir_all(&model_dir)?;
    let outcome = run_loop(&seed_set, &pool, &trainer, &annotation, |report, labels, model| {
        let k = report.iteration;
        let rows: Vec<ManifestEntry> = pool_manifest
            .entries
            .iter()
            .zip(labels)
            .map(|(e, &l)| ManifestEntry {
                label: Some(l),
                label_source: Some(LabelSource::Automatic(k).to_string()),
                ..e.clone()
            })
            .collect();
        let io = |e: anyhow::Error| tgcritic_core::annotate::AnnotateError::Io(std::io::Error::other(format!("{e:#}")));
        write_jsonl(&snap_dir.join(format!("iteration_{k}.jsonl")), &rows).map_err(io)?;
        model.save(
            model_dir.join(format!("iteration_{k}.json")),
            checkpoint_metadata(args.seed, &cfg, &[("iteration", k.to_string())]),
        )?;
        match &report.agreement {
            Some(a) => println!("iteration {k}: agreement {:.4}, labels {:?}", a.accuracy, report.label_counts),
            None => println!("iteration {k}: labels {:?}", report.label_counts),
        }
        Ok(())
    })?;

    let mut w = csv::Writer::from_path(args.out.join("agreement.csv"))?;
    for r in &outcome.reports {
        w.serialize(AgreementRow::from(r))?;
    }
    w.flush()?;
    write_json(
        &args.out.join("annotate_run.json"),
        &RunRecord {
            seed: args.seed,
            config_digest: cfg.digest(),
            params_digest: cache.params_digest(),
            iterations: args.iterations,
            schedule: &schedule,
            annotation: &annotation,
            reports: &outcome.reports,
        },
    )?;
    Ok(())
}
