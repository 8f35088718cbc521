use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use tgcritic_core::audio::load_wav;
use tgcritic_core::cqt::{CqtParams, KernelBank};
use tgcritic_core::features::song_features;
use tgcritic_core::model::{song_probs, ClassProbs, TgCritic};
use tgcritic_core::nn::Tensor;
use tgcritic_core::timbre::StubEmbedder;
use tgcritic_core::train::weighted_score;

use crate::manifest::Manifest;
use crate::{input_error, ScoreArgs};

#[derive(Debug, Serialize)]
pub struct CurveRow {
    pub start_s: f64,
    pub p_awesome: f64,
    pub p_mediocre: f64,
    pub p_inferior: f64,
}

#[derive(Debug, Serialize)]
pub struct ScoreOutput {
    pub sample_id: String,
    pub seed: Option<String>,
    pub config_digest: String,
    pub padded: bool,
    pub timbre_missing: bool,
    pub curve: Vec<CurveRow>,
    pub song_probs: ClassProbs,
    pub weighted_score: f64,
}

fn score_one(
    model: &TgCritic,
    seed: Option<&String>,
    bank: &KernelBank,
    stub: &StubEmbedder,
    id: &str,
    path: &Path,
    pad_short: bool,
) -> Result<ScoreOutput> {
    let clip = load_wav(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    let features = song_features(&clip, bank, stub)?;
    let window = model.config().hr.window_frames;
    let mut cqt = features.cqt;
    if cqt.frames() < window {
        if !pad_short {
            let min_s = (window - 1) as f64 * bank.params().hop_seconds();
            return Err(input_error(format!(
                "{}: audio is {:.3} s, shorter than the {min_s:.3} s analysis window (use --pad-short)",
                path.display(),
                clip.duration_seconds()
            )));
        }
        cqt = cqt.pad_to(window);
    }
    let curve = model.evaluation_curve(&cqt, &Tensor::vector(features.timbre.values().to_vec()))?;
    let probs = song_probs(&curve)?;
    Ok(ScoreOutput {
        sample_id: id.to_string(),
        seed: seed.cloned(),
        config_digest: model.config().digest(),
        padded: curve.padded,
        timbre_missing: features.timbre.missing,
        curve: curve
            .points
            .iter()
            .map(|p| CurveRow {
                start_s: p.start_frame as f64 * cqt.hop_seconds(),
                p_awesome: p.probs.p_awesome,
                p_mediocre: p.probs.p_mediocre,
                p_inferior: p.probs.p_inferior,
            })
            .collect(),
        song_probs: probs,
        weighted_score: weighted_score(&probs)?,
    })
}

pub fn run(args: &ScoreArgs) -> Result<()> {
    let (model, meta) = TgCritic::load(&args.checkpoint)
        .map_err(|e| input_error(format!("cannot load checkpoint {}: {e}", args.checkpoint.display())))?;
    let inputs: Vec<(String, PathBuf)> = match (&args.audio, &args.manifest) {
        (Some(a), _) => {
            let id = a
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "audio".into());
            vec![(id, a.clone())]
        }
        (None, Some(m)) => {
            let m = Manifest::read(m)?;
            m.entries.iter().map(|e| (e.sample_id.clone(), m.audio_path(e))).collect()
        }
        (None, None) => return Err(input_error("give --audio or --manifest")),
    };
    let bank = KernelBank::new(CqtParams::default())?;
    let stub = StubEmbedder::new();
    let outputs = inputs
        .par_iter()
        .map(|(id, p)| score_one(&model, meta.get("seed"), &bank, &stub, id, p, args.pad_short))
        .collect::<Result<Vec<_>>>()?;
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for o in &outputs {
                crate::extract::write_json(&dir.join(format!("{}.score.json", o.sample_id)), o)?;
            }
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            for o in &outputs {
                serde_json::to_writer(&mut stdout, o)?;
                writeln!(stdout)?;
            }
        }
    }
    Ok(())
}
