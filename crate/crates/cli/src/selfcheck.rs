//! Built-in sanity checks; each prints one PASS/FAIL line.

use std::f64::consts::PI;
use std::time::Instant;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgcritic_core::audio::AudioClip;
use tgcritic_core::cqt::{compute_cqt, frame_window, normalize, CqtParams, KernelBank, WINDOW_FRAMES};
use tgcritic_core::model::{ClassProbs, ModelConfig, ModelError, TgCritic};
use tgcritic_core::nn::{grad_check, Coords, NnError, Tape, Tensor};
use tgcritic_core::train::weighted_score;

pub const GRAD_TOL: f64 = 1e-4;
pub const PARAM_TARGET: f64 = 820_000.0;

pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn to_nn(e: ModelError) -> NnError {
    match e {
        ModelError::Nn(n) => n,
        other => NnError::InvalidArgument(other.to_string()),
    }
}

/// Max relative gradient error of the full forward pass plus cross-entropy.
pub fn model_grad_error(cfg: ModelConfig, per_param: usize, seed: u64) -> Result<f64> {
    let mut m = TgCritic::new(cfg)?;
    let hr = &m.config().hr;
    let x = random_tensor(&[hr.window_frames, hr.freq_bins, 1], seed);
    let v = random_tensor(&[m.config().timbre_dim], seed + 1);
    let mut store = std::mem::take(m.store_mut());
    let report = grad_check(&mut store, 1e-5, Coords::Sample { per_param, seed }, |tape| {
        let p = m.forward(tape, &x, &v).map_err(to_nn)?;
        tape.cross_entropy(p, (seed % 3) as usize)
    })?;
    Ok(report.max_rel_error)
}

/// A narrow network with a short window, cheap enough to probe densely.
pub fn small_config(seed: u64) -> ModelConfig {
    let mut c = ModelConfig::full(seed);
    c.hr.window_frames = 16;
    c.hr.stage_channels = vec![3, 4, 5];
    c.hr.fusion_channels = 4;
    c.timbre_dim = 10;
    c.timbre_hidden = 6;
    c.branch_dim = 5;
    c.hr.output_dim = 5;
    c.head_hidden = 4;
    c
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t = Instant::now();
    match f() {
        Ok((pass, detail)) => Check {
            name,
            pass,
            detail: format!("{detail} [{:.1} s]", t.elapsed().as_secs_f64()),
        },
        Err(e) => Check {
            name,
            pass: false,
            detail: format!("error: {e:#}"),
        },
    }
}

pub fn all_checks() -> Vec<Check> {
    vec![
        check("grad_check_small_network", || {
            let e = model_grad_error(small_config(11), 6, 1)?;
            Ok((e < GRAD_TOL, format!("max relative error {e:.2e} (tolerance {GRAD_TOL:.0e})")))
        }),
        check("grad_check_full_model", || {
            let e = model_grad_error(ModelConfig::full(2), 1, 3)?;
            Ok((e < GRAD_TOL, format!("max relative error {e:.2e} (tolerance {GRAD_TOL:.0e})")))
        }),
        check("shape_laws", || {
            let m = TgCritic::new(ModelConfig::full(0))?;
            let mut tape = Tape::new(m.store());
            let x = tape.input(random_tensor(&[256, 96, 1], 1));
            let (hr, trace) = m.hr_forward_traced(&mut tape, x)?;
            let v = tape.input(random_tensor(&[512], 2));
            let tb = m.timbre_forward(&mut tape, v)?;
            let p = m.classify(&mut tape, hr, tb)?;
            let sum: f64 = tape.value(p).data().iter().sum();
            let (hr_shape, tb_shape) = (tape.value(hr).shape().to_vec(), tape.value(tb).shape().to_vec());
            let pass = trace.reshape == [256, 768] && hr_shape == [64] && tb_shape == [64] && (sum - 1.0).abs() <= 1e-9;
            Ok((
                pass,
                format!("reshape {:?}, HR {hr_shape:?}, timbre {tb_shape:?}, prob sum {sum:.12}", trace.reshape),
            ))
        }),
        check("cqt_sine_bin", || {
            let bank = KernelBank::new(CqtParams::default())?;
            let n = (8.192 * 16_000.0) as usize;
            let samples = (0..n).map(|i| 0.5 * (2.0 * PI * 440.0 * i as f64 / 16_000.0).sin()).collect();
            let cqt = compute_cqt(&AudioClip::new(samples, 16_000, "sine")?, &bank)?;
            let window = normalize(&frame_window(&cqt, 0, WINDOW_FRAMES)?);
            let frames = cqt.frames();
            // the first and last frames see the zero padding
            let bad = (8..frames - 8).filter(|&t| cqt.argmax_bin(t) != 58).count();
            Ok((
                bad == 0 && window.frames() == 256 && window.bins() == 96,
                format!("{frames} frames, {bad} interior frames off bin 58, window {}x{}", window.frames(), window.bins()),
            ))
        }),
        check("parameter_budget", || {
            let n = TgCritic::new(ModelConfig::full(0))?.param_count();
            let rel = (n as f64 - PARAM_TARGET) / PARAM_TARGET;
            Ok((rel.abs() <= 0.2, format!("{n} parameters, {:+.1}% from 0.82M (limit 20%)", 100.0 * rel)))
        }),
        check("weighted_score", || {
            let cases = [((1.0, 0.0, 0.0), 1.0), ((0.0, 0.0, 1.0), 0.0), ((0.2, 0.5, 0.3), 0.45)];
            let mut pass = true;
            let mut got = Vec::new();
            for ((a, m, i), want) in cases {
                let s = weighted_score(&ClassProbs::new(a, m, i)?)?;
                pass &= s == want;
                got.push(s);
            }
            Ok((pass, format!("scores {got:?}")))
        }),
    ]
}

pub fn run() -> Result<bool> {
    let checks = all_checks();
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    Ok(failed == 0)
}
