use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgcritic_core::cqt::CqtMatrix;
use tgcritic_core::model::{song_probs, ModelConfig, ModelError, TgCritic, SCALES};
use tgcritic_core::nn::{grad_check, Coords, NnError, Tape, Tensor};

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn small_config() -> ModelConfig {
    let mut c = ModelConfig::full(11);
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

fn to_nn(e: ModelError) -> NnError {
    match e {
        ModelError::Nn(n) => n,
        other => NnError::InvalidArgument(other.to_string()),
    }
}

#[test]
fn full_parameter_budget() {
    let m = TgCritic::new(ModelConfig::full(0)).unwrap();
    assert_eq!(m.param_count_with_prefix("timbre."), 512 * 256 + 256 + 256 * 64 + 64);
    let total = m.param_count();
    assert!((660_000..=980_000).contains(&total), "{total}");
}

#[test]
fn shape_laws_full_width() {
    let m = TgCritic::new(ModelConfig::full(0)).unwrap();
    let mut tape = Tape::new(m.store());
    let x = tape.input(random_tensor(&[256, 96, 1], 1));
    let (out, trace) = m.hr_forward_traced(&mut tape, x).unwrap();
    let expect_freq = [48, 24, 12];
    let channels = [32, 48, 64];
    for (s, shapes) in trace.stage_shapes.iter().enumerate() {
        for scale in 0..SCALES {
            assert_eq!(shapes[scale], vec![256 >> scale, expect_freq[s], channels[s]]);
        }
    }
    assert_eq!(trace.reshape, vec![256, 768]);
    assert_eq!(tape.value(out).shape(), &[64]);
}

#[test]
fn end_to_end_probabilities() {
    let m = TgCritic::new(ModelConfig::desk(5)).unwrap();
    let x = random_tensor(&[256, 96, 1], 2);
    let v = random_tensor(&[512], 3).data().iter().map(|a| (a + 1.0) / 2.0).collect();
    let v = Tensor::new(&[512], v).unwrap();
    let a = m.predict(&x, &v).unwrap();
    let b = m.predict(&x, &v).unwrap();
    assert_eq!(a, b);
    assert!((a.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn rejects_bad_window_shape() {
    let m = TgCritic::new(ModelConfig::desk(5)).unwrap();
    let mut tape = Tape::new(m.store());
    let x = tape.input(Tensor::zeros(&[254, 96, 1]));
    assert!(matches!(m.hr_forward(&mut tape, x), Err(ModelError::InputShape { .. })));
    let v = tape.input(Tensor::zeros(&[511]));
    assert!(m.timbre_forward(&mut tape, v).is_err());
}

#[test]
fn same_seed_same_weights() {
    let a = TgCritic::new(ModelConfig::desk(9)).unwrap();
    let b = TgCritic::new(ModelConfig::desk(9)).unwrap();
    let c = TgCritic::new(ModelConfig::desk(10)).unwrap();
    assert_eq!(a.store().digest(""), b.store().digest(""));
    assert_ne!(a.store().digest(""), c.store().digest(""));
}

#[test]
fn full_network_gradients_match_finite_differences() {
    let mut m = TgCritic::new(small_config()).unwrap();
    let x = random_tensor(&[16, 96, 1], 4);
    let v = random_tensor(&[10], 5);
    let mut store = std::mem::take(m.store_mut());
    let report = grad_check(&mut store, 1e-5, Coords::Sample { per_param: 6, seed: 1 }, |tape| {
        let p = m.forward(tape, &x, &v).map_err(to_nn)?;
        tape.cross_entropy(p, 2)
    })
    .unwrap();
    *m.store_mut() = store;
    assert!(report.checked > 100);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn full_width_gradients_sampled() {
    let mut m = TgCritic::new(ModelConfig::full(2)).unwrap();
    let x = random_tensor(&[256, 96, 1], 6);
    let v = random_tensor(&[512], 7);
    let mut store = std::mem::take(m.store_mut());
    let report = grad_check(&mut store, 1e-5, Coords::Sample { per_param: 1, seed: 3 }, |tape| {
        let p = m.forward(tape, &x, &v).map_err(to_nn)?;
        tape.cross_entropy(p, 0)
    })
    .unwrap();
    *m.store_mut() = store;
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn aux_head_gradients() {
    let mut m = TgCritic::new(small_config()).unwrap();
    m.attach_aux_head(4).unwrap();
    let x = random_tensor(&[16, 96, 1], 8);
    let mut store = std::mem::take(m.store_mut());
    let report = grad_check(&mut store, 1e-5, Coords::Sample { per_param: 4, seed: 2 }, |tape| {
        let xv = tape.input(x.clone());
        let hr = m.hr_forward(tape, xv).map_err(to_nn)?;
        let p = m.aux_classify(tape, hr).map_err(to_nn)?;
        tape.cross_entropy(p, 1)
    })
    .unwrap();
    *m.store_mut() = store;
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn evaluation_curve_counts_and_validity() {
    let mut c = small_config();
    c.timbre_dim = 512;
    let m = TgCritic::new(c).unwrap();
    let v = random_tensor(&[512], 9);
    let cqt = |frames: usize| {
        CqtMatrix::from_values(frames, 96, random_tensor(&[frames * 96], frames as u64).into_data(), 0.032).unwrap()
    };
    // window of 16 frames, hop 64: frames 16 -> 1 point, 16 + 128 -> 3 points
    assert_eq!(m.evaluation_curve(&cqt(16), &v).unwrap().len(), 1);
    let curve = m.evaluation_curve(&cqt(144), &v).unwrap();
    assert_eq!(curve.points.iter().map(|p| p.start_frame).collect::<Vec<_>>(), vec![0, 64, 128]);
    assert!(curve.points.iter().all(|p| p.probs.is_valid()));
    assert!(song_probs(&curve).unwrap().is_valid());
    assert!(matches!(m.evaluation_curve(&cqt(15), &v), Err(ModelError::TooShort { .. })));
}

#[test]
#[ignore = "timing probe"]
fn timing_probe() {
    for (name, cfg) in [("desk", ModelConfig::desk(0)), ("full", ModelConfig::full(0))] {
        let m = TgCritic::new(cfg).unwrap();
        let x = random_tensor(&[256, 96, 1], 1);
        let v = random_tensor(&[512], 2);
        let t0 = Instant::now();
        let mut tape = Tape::new(m.store());
        let p = m.forward(&mut tape, &x, &v).unwrap();
        let loss = tape.cross_entropy(p, 0).unwrap();
        let t1 = Instant::now();
        let _g = tape.backward(loss).unwrap();
        let t2 = Instant::now();
        println!("{name}: params {} fwd {:?} bwd {:?}", m.param_count(), t1 - t0, t2 - t1);
    }
}
