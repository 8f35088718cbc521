use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use tgcritic_core::annotate::PreparedSample;

use crate::cache::{FeatureCache, Lookup};
use crate::manifest::Manifest;
use crate::{input_error, ExtractArgs};

#[derive(Debug, Serialize)]
struct ExtractError {
    sample_id: String,
    error: String,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    seed: u64,
    params_digest: &'a str,
    samples: usize,
    computed: usize,
    cached: usize,
    failed: usize,
}

/// Features for every manifest entry, in manifest order. Failures are collected, not fatal.
pub fn extract_all(
    manifest: &Manifest,
    cache: &FeatureCache,
    force: bool,
) -> Vec<Result<(PreparedSample, Lookup)>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let (f, lookup) = cache.get(&e.sample_id, &manifest.audio_path(e), force)?;
            Ok((
                PreparedSample {
                    id: e.sample_id.clone(),
                    metadata: e.metadata.unwrap_or(tgcritic_core::annotate::MetadataRecord {
                        intonation_score: 0.0,
                        rhythm_score: 0.0,
                        likes: 0,
                        comments: 0,
                        popularity_confounder: None,
                    }),
                    cqt: f.cqt,
                    timbre: f.timbre,
                    truth: e.label,
                },
                lookup,
            ))
        })
        .collect()
}

/// Like [`extract_all`] but the first failure aborts.
pub fn extract_strict(manifest: &Manifest, cache: &FeatureCache, force: bool) -> Result<Vec<PreparedSample>> {
    extract_all(manifest, cache, force)
        .into_iter()
        .zip(&manifest.entries)
        .map(|(r, e)| r.map(|(s, _)| s).with_context(|| format!("sample {}", e.sample_id)))
        .collect()
}

pub fn run(args: &ExtractArgs) -> Result<bool> {
    let manifest = Manifest::read(&args.manifest)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let cache = FeatureCache::new(args.out.join("cache"))?;
    let results = extract_all(&manifest, &cache, args.force);
    let mut errors = Vec::new();
    let (mut computed, mut cached) = (0, 0);
    for (r, e) in results.iter().zip(&manifest.entries) {
        match r {
            Ok((_, Lookup::Hit)) => cached += 1,
            Ok((_, Lookup::Computed)) => computed += 1,
            Err(err) => errors.push(ExtractError {
                sample_id: e.sample_id.clone(),
                error: format!("{err:#}"),
            }),
        }
    }
    let summary = Summary {
        seed: args.seed,
        params_digest: cache.params_digest(),
        samples: manifest.entries.len(),
        computed,
        cached,
        failed: errors.len(),
    };
    write_json(&args.out.join("extract_summary.json"), &summary)?;
    let sidecar = args.out.join("extract_errors.jsonl");
    if errors.is_empty() {
        let _ = fs::remove_file(&sidecar);
    } else {
        crate::manifest::write_jsonl(&sidecar, &errors)?;
    }
    println!(
        "extracted {} samples: {computed} computed, {cached} cached, {} failed",
        summary.samples,
        errors.len()
    );
    if !errors.is_empty() {
        return Err(input_error(format!(
            "{} of {} samples failed; see {}",
            errors.len(),
            summary.samples,
            sidecar.display()
        )));
    }
    Ok(true)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
