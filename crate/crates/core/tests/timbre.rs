use std::f64::consts::PI;
use std::path::PathBuf;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgcritic_core::audio::AudioClip;
use tgcritic_core::timbre::*;

const SR: u32 = 16_000;

fn tone(seconds: f64, freq: f64, amp: f64) -> Vec<f64> {
    let n = (seconds * SR as f64) as usize;
    (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / SR as f64).sin()).collect()
}

fn noise(seconds: f64, amp: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * SR as f64) as usize;
    (0..n).map(|_| amp * rng.gen_range(-1.0..1.0)).collect()
}

fn clip(s: Vec<f64>) -> AudioClip {
    AudioClip::new(s, SR, "t").unwrap()
}

/// Returns the window's mean sample value in every coordinate.
struct MeanProvider;

impl EmbeddingProvider for MeanProvider {
    fn name(&self) -> &str {
        "mean"
    }
    fn embed(&self, w: &AudioClip) -> Result<Vec<f64>, TimbreError> {
        let m = w.samples().iter().sum::<f64>() / w.len() as f64;
        Ok(vec![m; EMBED_DIM])
    }
}

#[test]
fn voicing_ratio_reference_cases() {
    assert_eq!(voicing_ratio(&clip(vec![0.0; 48_000])), 0.0);
    assert_eq!(voicing_ratio(&clip(tone(3.0, 440.0, 1.0))), 1.0);
    let mut half = tone(1.5, 440.0, 0.8);
    half.extend(vec![0.0; 24_000]);
    let r = voicing_ratio(&clip(half));
    assert!((r - 0.5).abs() <= 0.05, "{r}");
}

#[test]
fn voicing_ratio_matches_frame_oracle() {
    // tone with a quiet tail at -40 dB: tail frames fall under the -35 dB line
    let mut s = tone(2.0, 300.0, 0.5);
    s.extend(tone(1.0, 300.0, 0.005));
    let (frame, hop) = (400, 160);
    let n = (s.len() - frame) / hop + 1;
    let rms: Vec<f64> = (0..n)
        .map(|i| (s[i * hop..i * hop + frame].iter().map(|v| v * v).sum::<f64>() / frame as f64).sqrt())
        .collect();
    let max = rms.iter().cloned().fold(0.0, f64::max);
    let want = rms.iter().filter(|&&r| 20.0 * (r / max).log10() > -35.0).count() as f64 / n as f64;
    assert!((voicing_ratio(&clip(s)) - want).abs() < 1e-12);
}

#[test]
fn timbregram_row_count_law() {
    for t in 3..=60usize {
        let g = build_timbregram(&clip(vec![0.1; t * SR as usize]), &MeanProvider).unwrap();
        assert_eq!(g.rows.len(), t - 2, "t = {t}");
        for (i, r) in g.rows.iter().enumerate() {
            assert_eq!(r.window_start, i as f64);
        }
    }
    // non-integer duration: floor((t - 3) / 1) + 1
    let g = build_timbregram(&clip(vec![0.1; 5 * SR as usize + 8000]), &MeanProvider).unwrap();
    assert_eq!(g.rows.len(), 3);
    assert!(build_timbregram(&clip(vec![0.1; 2 * SR as usize]), &MeanProvider).is_err());
}

#[test]
fn silent_middle_third_rows_are_invalid() {
    let mut s = tone(4.0, 220.0, 0.5);
    s.extend(vec![0.0; 4 * SR as usize]);
    s.extend(tone(4.0, 220.0, 0.5));
    let c = clip(s);
    let g = build_timbregram(&c, &MeanProvider).unwrap();
    assert_eq!(g.rows.len(), 10);
    for (i, r) in g.rows.iter().enumerate() {
        let w = AudioClip::new(c.samples()[i * 16_000..i * 16_000 + 48_000].to_vec(), SR, "w").unwrap();
        assert_eq!(r.valid, voicing_ratio(&w) >= 0.70, "row {i}");
    }
    let flags: Vec<bool> = g.rows.iter().map(|r| r.valid).collect();
    assert!(flags[0] && flags[9]);
    assert!(!flags[4] && !flags[5], "{flags:?}");
}

fn random_gram(rows: usize, seed: u64) -> Timbregram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Timbregram {
        rows: (0..rows)
            .map(|i| {
                let valid = i == 0 || rng.gen_bool(0.7);
                let v = (0..EMBED_DIM).map(|_| rng.gen_range(-5.0..5.0)).collect();
                TimbreEmbedding::new(i as f64, valid, v).unwrap()
            })
            .collect(),
    }
}

#[test]
fn aggregate_matches_welford_oracle() {
    let g = random_gram(17, 3);
    let v = aggregate(&g).unwrap();
    for d in 0..EMBED_DIM {
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for r in g.rows.iter().filter(|r| r.valid) {
            n += 1.0;
            let x = r.vector[d];
            let delta = x - mean;
            mean += delta / n;
            m2 += delta * (x - mean);
        }
        assert!((v.mean_half()[d] - mean).abs() < 1e-12);
        assert!((v.variance_half()[d] - m2 / n).abs() < 1e-12);
    }
}

#[test]
fn two_rows_normalize_to_zero_and_one() {
    let mut g = random_gram(2, 8);
    g.rows[1].valid = true;
    let n = minmax_normalize(&g).unwrap();
    for d in 0..EMBED_DIM {
        let mut pair = [n.rows[0].vector[d], n.rows[1].vector[d]];
        pair.sort_by(f64::total_cmp);
        assert_eq!(pair, [0.0, 1.0]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalized_aggregate_ranges(rows in 1usize..20, seed in any::<u64>()) {
        let g = random_gram(rows, seed);
        let n = minmax_normalize(&g).unwrap();
        for r in n.valid_rows() {
            prop_assert!(r.vector.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let v = aggregate(&n).unwrap();
        prop_assert!(v.mean_half().iter().all(|m| (0.0..=1.0).contains(m)));
        prop_assert!(v.variance_half().iter().all(|s| (0.0..=0.25).contains(s)));
    }

    #[test]
    fn row_order_is_irrelevant(rows in 2usize..12, seed in any::<u64>()) {
        let g = random_gram(rows, seed);
        let mut rev = g.clone();
        rev.rows.reverse();
        let a = aggregate(&minmax_normalize(&g).unwrap()).unwrap();
        let b = aggregate(&minmax_normalize(&rev).unwrap()).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn precomputed_jsonl_roundtrip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.jsonl");
    let g = random_gram(4, 1);
    g.write_jsonl(&path).unwrap();
    assert_eq!(Timbregram::read_jsonl(&path).unwrap(), g);

    std::fs::write(&path, "{\"start_s\": 0.0, \"valid\": true, \"vec\": [1.0, 2.0]}\n").unwrap();
    assert!(matches!(Timbregram::read_jsonl(&path), Err(TimbreError::Precomputed { line: 1, .. })));
}

#[test]
fn stub_rejects_wrong_window() {
    let stub = StubEmbedder::new();
    assert!(matches!(stub.embed(&clip(vec![0.0; 47_999])), Err(TimbreError::WindowLength { .. })));
}

#[test]
fn stub_is_deterministic_and_silence_is_constant() {
    let stub = StubEmbedder::new();
    let w = clip(noise(3.0, 0.3, 4));
    assert_eq!(stub.embed(&w).unwrap(), stub.embed(&w).unwrap());
    let silent = stub.statistics(&clip(vec![0.0; 48_000])).unwrap();
    let floor = (1e-12f64).ln();
    assert!(silent[..STUB_BANDS].iter().all(|&m| (m - floor).abs() < 1e-12));
    assert!(silent[STUB_BANDS..3 * STUB_BANDS].iter().all(|&v| v.abs() < 1e-20));
    let flat = &silent[3 * STUB_BANDS..];
    for sub in flat.chunks(3) {
        assert!((sub[2] - 1.0).abs() < 1e-12, "silence flatness {sub:?}");
    }
}

#[test]
fn stub_gain_moves_only_energy_statistics() {
    let stub = StubEmbedder::new();
    let base: Vec<f64> = tone(3.0, 330.0, 0.2).iter().zip(noise(3.0, 0.05, 9)).map(|(a, b)| a + b).collect();
    let loud: Vec<f64> = base.iter().map(|v| v * 2.0).collect();
    let a = stub.statistics(&clip(base)).unwrap();
    let b = stub.statistics(&clip(loud)).unwrap();
    // log-energy band means shift by ln 4
    for k in 0..STUB_BANDS {
        assert!((b[k] - a[k] - 4f64.ln()).abs() < 1e-6, "band {k}");
    }
    // centroid and flatness are scale-free
    for sub in 0..STUB_SUBWINDOWS {
        let i = 3 * STUB_BANDS + 3 * sub;
        assert!((a[i] - b[i]).abs() < 1e-9);
        assert!((a[i + 2] - b[i + 2]).abs() < 1e-9);
    }
}

#[test]
fn stub_flatness_separates_sine_and_noise() {
    let stub = StubEmbedder::new();
    let flat = |s: Vec<f64>| -> Vec<f64> {
        let st = stub.statistics(&clip(s)).unwrap();
        (0..STUB_SUBWINDOWS).map(|i| st[3 * STUB_BANDS + 3 * i + 2]).collect()
    };
    let silences: Vec<Vec<f64>> = (0..3).map(|_| flat(vec![0.0; 48_000])).collect();
    let spread = silences
        .iter()
        .flat_map(|s| s.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let spread = spread.1 - spread.0;
    let sine = flat(tone(3.0, 440.0, 0.5));
    let white = flat(noise(3.0, 0.5, 2));
    for (s, w) in sine.iter().zip(&white) {
        assert!((w - s) > 10.0 * spread && (w - s) > 0.3, "sine {s} noise {w}");
    }
}

#[test]
fn gain_keeps_normalized_timbre_in_range() {
    let stub = StubEmbedder::new();
    let s: Vec<f64> = tone(6.0, 262.0, 0.2).iter().zip(noise(6.0, 0.02, 5)).map(|(a, b)| a + b).collect();
    for gain in [1.0, 2.0] {
        let c = clip(s.iter().map(|v| v * gain).collect());
        let v = timbre_vector(&build_timbregram(&c, &stub).unwrap()).unwrap();
        assert!(!v.missing);
        assert!(v.mean_half().iter().all(|m| (0.0..=1.0).contains(m)));
    }
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/stub_sine440.json")
}

#[test]
fn stub_sine_matches_golden_vector() {
    let v = StubEmbedder::new().embed(&clip(tone(3.0, 440.0, 0.5))).unwrap();
    if std::env::var_os("TGC_BLESS").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), serde_json::to_string_pretty(&v).unwrap()).unwrap();
    }
    let golden: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(golden_path()).unwrap()).unwrap();
    assert_eq!(golden.len(), EMBED_DIM);
    for (a, b) in v.iter().zip(&golden) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    }
}
