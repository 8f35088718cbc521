//! Layer ops against naive loop oracles, plus finite-difference gradient checks.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgcritic_core::nn::{grad_check, Axis, Coords, NnError, ParamStore, Tape, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Same-padded cross-correlation by explicit loops over `[T,F,Cin]`.
fn naive_conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (t, f, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kt, kf, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let mut out = vec![0.0; t * f * cout];
    for i in 0..t {
        for j in 0..f {
            for o in 0..cout {
                let mut acc = b.data()[o];
                for di in 0..kt {
                    for dj in 0..kf {
                        let si = i as isize + di as isize - (kt / 2) as isize;
                        let sj = j as isize + dj as isize - (kf / 2) as isize;
                        if si < 0 || sj < 0 || si >= t as isize || sj >= f as isize {
                            continue;
                        }
                        for c in 0..cin {
                            acc += x.data()[(si as usize * f + sj as usize) * cin + c]
                                * w.data()[((di * kf + dj) * cin + c) * cout + o];
                        }
                    }
                }
                out[(i * f + j) * cout + o] = acc;
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv2d_identity_and_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[5, 4, 2], &mut rng);
    let mut store = ParamStore::new();
    let mut w = vec![0.0; 9 * 2 * 2];
    for c in 0..2 {
        w[((4) * 2 + c) * 2 + c] = 1.0; // center tap, channel c -> c
    }
    let wi = store.add("w", Tensor::new(&[3, 3, 2, 2], w).unwrap()).unwrap();
    let bi = store.add("b", Tensor::zeros(&[2])).unwrap();
    let wz = store.add("wz", Tensor::zeros(&[3, 3, 2, 3])).unwrap();
    let bc = store.add("bc", Tensor::filled(&[3], 0.25)).unwrap();
    let mut tape = Tape::new(&store);
    let xv = tape.input(x.clone());
    let (w, b) = (tape.param(wi), tape.param(bi));
    let y = tape.conv2d(xv, w, b).unwrap();
    assert_eq!(tape.value(y), &x);
    let (w, b) = (tape.param(wz), tape.param(bc));
    let y = tape.conv2d(xv, w, b).unwrap();
    assert_eq!(tape.value(y).shape(), &[5, 4, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[6, 6, 2], &mut rng);
    let w = random(&[3, 3, 2, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let mut store = ParamStore::new();
    let wi = store.add("w", w.clone()).unwrap();
    let bi = store.add("b", b.clone()).unwrap();
    let mut tape = Tape::new(&store);
    let xv = tape.input(x.clone());
    let (wv, bv) = (tape.param(wi), tape.param(bi));
    let y = tape.conv2d(xv, wv, bv).unwrap();
    assert!(max_diff(tape.value(y).data(), &naive_conv2d(&x, &w, &b)) < 1e-12);
}

#[test]
fn conv1d_identity_impulse_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let mut ident = vec![0.0; 5];
    ident[2] = 1.0;
    let wi = store.add("id", Tensor::new(&[5, 1, 1], ident).unwrap()).unwrap();
    let kernel = vec![1.0, 2.0, 3.0, 4.0, 5.0];
    let wk = store.add("k", Tensor::new(&[5, 1, 1], kernel.clone()).unwrap()).unwrap();
    let b0 = store.add("b0", Tensor::zeros(&[1])).unwrap();
    let w = random(&[5, 3, 4], &mut rng);
    let b = random(&[4], &mut rng);
    let wr = store.add("w", w.clone()).unwrap();
    let br = store.add("b", b.clone()).unwrap();

    let mut tape = Tape::new(&store);
    let sig = random(&[9, 1], &mut rng);
    let s = tape.input(sig.clone());
    let (wv, bv) = (tape.param(wi), tape.param(b0));
    let y = tape.conv1d(s, wv, bv).unwrap();
    assert_eq!(tape.value(y), &sig);

    let mut imp = vec![0.0; 9];
    imp[4] = 1.0;
    let s = tape.input(Tensor::new(&[9, 1], imp).unwrap());
    let (wv, bv) = (tape.param(wk), tape.param(b0));
    let y = tape.conv1d(s, wv, bv).unwrap();
    // cross-correlation reverses the kernel around the impulse
    assert_eq!(&tape.value(y).data()[2..7], &[5.0, 4.0, 3.0, 2.0, 1.0]);

    let x = random(&[7, 3], &mut rng);
    let xv = tape.input(x.clone());
    let (wv, bv) = (tape.param(wr), tape.param(br));
    let y = tape.conv1d(xv, wv, bv).unwrap();
    let x3 = x.clone().reshaped(&[7, 1, 3]).unwrap();
    let w4 = w.clone().reshaped(&[5, 1, 3, 4]).unwrap();
    assert!(max_diff(tape.value(y).data(), &naive_conv2d(&x3, &w4, &b)) < 1e-12);
}

#[test]
fn conv1x1_is_dense_per_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[4, 3, 5], &mut rng);
    let w = random(&[1, 1, 5, 2], &mut rng);
    let b = random(&[2], &mut rng);
    let mut store = ParamStore::new();
    let wi = store.add("w", w.clone()).unwrap();
    let bi = store.add("b", b.clone()).unwrap();
    let wd = store.add("wd", w.clone().reshaped(&[5, 2]).unwrap()).unwrap();
    let eye = {
        let mut e = vec![0.0; 25];
        (0..5).for_each(|i| e[i * 5 + i] = 1.0);
        store.add("eye", Tensor::new(&[1, 1, 5, 5], e).unwrap()).unwrap()
    };
    let z5 = store.add("z5", Tensor::zeros(&[5])).unwrap();
    let mut tape = Tape::new(&store);
    let xv = tape.input(x.clone());
    let (wv, bv) = (tape.param(wi), tape.param(bi));
    let y = tape.conv1x1(xv, wv, bv).unwrap();
    let out = tape.value(y).data().to_vec();
    for pos in 0..12 {
        let row = tape.input(Tensor::vector(x.data()[pos * 5..pos * 5 + 5].to_vec()));
        let (wdv, bv) = (tape.param(wd), tape.param(bi));
        let d = tape.dense(row, wdv, bv).unwrap();
        assert!(max_diff(&out[pos * 2..pos * 2 + 2], tape.value(d).data()) < 1e-14);
    }
    let (ev, zv) = (tape.param(eye), tape.param(z5));
    let y = tape.conv1x1(xv, ev, zv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn pooling_and_upsampling() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::new(&[4, 1, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
    let p = tape.avg_pool(x, Axis::Time, 2).unwrap();
    assert_eq!(tape.value(p).data(), &[2.0, 6.0]);
    let same = tape.avg_pool(x, Axis::Time, 1).unwrap();
    assert_eq!(tape.value(same), tape.value(x));
    assert!(matches!(tape.avg_pool(x, Axis::Time, 3), Err(NnError::Shape(_))));

    let ab = tape.input(Tensor::new(&[2, 1], vec![1.5, -2.0]).unwrap());
    let up = tape.upsample_nearest(ab, Axis::Time, 2).unwrap();
    assert_eq!(tape.value(up).data(), &[1.5, 1.5, -2.0, -2.0]);
    let one = tape.upsample_nearest(ab, Axis::Time, 1).unwrap();
    assert_eq!(tape.value(one), tape.value(ab));
    assert!(matches!(
        tape.upsample_nearest(ab, Axis::Time, 0),
        Err(NnError::InvalidArgument(_))
    ));
}

#[test]
fn avg_pool_matches_reshape_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[8, 6, 3], &mut rng);
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let xv = tape.input(x.clone());
    let pf = tape.avg_pool(xv, Axis::Frequency, 3).unwrap();
    let pt = tape.avg_pool(xv, Axis::Time, 4).unwrap();
    let at = |t: usize, f: usize, c: usize| x.data()[(t * 6 + f) * 3 + c];
    for t in 0..8 {
        for g in 0..2 {
            for c in 0..3 {
                let mean = (0..3).map(|k| at(t, g * 3 + k, c)).sum::<f64>() / 3.0;
                assert!((tape.value(pf).data()[(t * 2 + g) * 3 + c] - mean).abs() < 1e-14);
            }
        }
    }
    for g in 0..2 {
        for f in 0..6 {
            for c in 0..3 {
                let mean = (0..4).map(|k| at(g * 4 + k, f, c)).sum::<f64>() / 4.0;
                assert!((tape.value(pt).data()[(g * 6 + f) * 3 + c] - mean).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn dense_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let mut eye = vec![0.0; 16];
    (0..4).for_each(|i| eye[i * 4 + i] = 1.0);
    let e = store.add("eye", Tensor::new(&[4, 4], eye).unwrap()).unwrap();
    let z = store.add("z", Tensor::zeros(&[4])).unwrap();
    let w = random(&[4, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let wi = store.add("w", w.clone()).unwrap();
    let bi = store.add("b", b.clone()).unwrap();
    let mut tape = Tape::new(&store);
    let x = random(&[4], &mut rng);
    let xv = tape.input(x.clone());
    let (ev, zv) = (tape.param(e), tape.param(z));
    let y = tape.dense(xv, ev, zv).unwrap();
    assert_eq!(tape.value(y), &x);
    let zero = tape.input(Tensor::zeros(&[4]));
    let (wv, bv) = (tape.param(wi), tape.param(bi));
    let y = tape.dense(zero, wv, bv).unwrap();
    assert_eq!(tape.value(y), &b);
    let y = tape.dense(xv, wv, bv).unwrap();
    let oracle: Vec<f64> = (0..3)
        .map(|j| b.data()[j] + (0..4).map(|i| x.data()[i] * w.data()[i * 3 + j]).sum::<f64>())
        .collect();
    assert!(max_diff(tape.value(y).data(), &oracle) < 1e-14);
    let bad = tape.input(Tensor::zeros(&[5]));
    assert!(matches!(tape.dense(bad, wv, bv), Err(NnError::Shape(_))));
}

#[test]
fn activations_and_loss() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::vector(vec![0.0, 1.0, -20.0]));
    let y = tape.elu(x);
    assert_eq!(tape.value(y).data()[0], 0.0);
    assert_eq!(tape.value(y).data()[1], 1.0);
    assert!((tape.value(y).data()[2] - ((-20f64).exp() - 1.0)).abs() < 1e-15);

    let u = tape.input(Tensor::vector(vec![0.3; 4]));
    let s = tape.softmax(u).unwrap();
    assert!(tape.value(s).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    let big = tape.input(Tensor::vector(vec![1000.0, 0.0, 0.0]));
    let s = tape.softmax(big).unwrap();
    assert!((tape.value(s).data()[0] - 1.0).abs() < 1e-12);
    assert!(tape.value(s).all_finite());
    let z = tape.input(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let s3 = tape.softmax(z).unwrap();
    assert!(tape.value(s3).data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

    let ce = tape.cross_entropy(s3, 1).unwrap();
    assert!((tape.value(ce).data()[0] - 3f64.ln()).abs() < 1e-12);
    let sure = tape.input(Tensor::vector(vec![0.0, 1.0, 0.0]));
    let ce = tape.cross_entropy(sure, 1).unwrap();
    assert_eq!(tape.value(ce).data()[0], 0.0);
    let ce = tape.cross_entropy(sure, 0).unwrap();
    assert!((tape.value(ce).data()[0] + 1e-12f64.ln()).abs() < 1e-9);
    let bad = tape.input(Tensor::vector(vec![0.5, 0.7]));
    assert!(tape.cross_entropy(bad, 0).is_err());
    assert!(tape.cross_entropy(sure, 3).is_err());

    let rows = tape.input(Tensor::new(&[3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap());
    let g = tape.global_avg_pool(rows).unwrap();
    assert_eq!(tape.value(g).data(), &[1.0, 2.0]);
    let single = tape.input(Tensor::new(&[1, 3], vec![4.0, 5.0, 6.0]).unwrap());
    let g = tape.global_avg_pool(single).unwrap();
    assert_eq!(tape.value(g).data(), &[4.0, 5.0, 6.0]);
    let empty = tape.input(Tensor::zeros(&[0, 3]));
    assert!(tape.global_avg_pool(empty).is_err());
}

#[test]
fn cross_entropy_matches_manual_log() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    for _ in 0..20 {
        let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let label = rng.gen_range(0..3);
        let pv = tape.input(Tensor::vector(p.clone()));
        let ce = tape.cross_entropy(pv, label).unwrap();
        assert!((tape.value(ce).data()[0] + p[label].ln()).abs() < 1e-14);
    }
}

#[test]
fn backward_of_sum_and_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let xi = store.add("x", random(&[3, 2], &mut rng)).unwrap();
    let w = random(&[4, 2], &mut rng);
    let x = random(&[4], &mut rng);
    let mut tape = Tape::new(&store);
    let xv = tape.param(xi);
    let s = tape.sum(xv);
    let g = tape.backward(s).unwrap();
    assert!(g.get(xi).unwrap().data().iter().all(|&v| v == 1.0));

    // L = sum((x.w + b).c) gives dL/dw = x c^T, dL/db = c, dL/dx = w c
    let c = [0.5, -2.0];
    let mut chain = ParamStore::new();
    let vi2 = chain.add("v", x.clone()).unwrap();
    let wi2 = chain.add("w", w.clone()).unwrap();
    let bi2 = chain.add("b", Tensor::zeros(&[2])).unwrap();
    let ci2 = chain.add("c", Tensor::new(&[2, 1], c.to_vec()).unwrap()).unwrap();
    let zi2 = chain.add("z", Tensor::zeros(&[1])).unwrap();
    let mut t3 = Tape::new(&chain);
    let (v, w_, b_) = (t3.param(vi2), t3.param(wi2), t3.param(bi2));
    let h = t3.dense(v, w_, b_).unwrap();
    let (cv, zv) = (t3.param(ci2), t3.param(zi2));
    let o = t3.dense(h, cv, zv).unwrap();
    let loss = t3.sum(o);
    let g = t3.backward(loss).unwrap();
    for i in 0..4 {
        for j in 0..2 {
            assert!((g.get(wi2).unwrap().data()[i * 2 + j] - x.data()[i] * c[j]).abs() < 1e-14);
        }
        let dx = w.data()[i * 2] * c[0] + w.data()[i * 2 + 1] * c[1];
        assert!((g.get(vi2).unwrap().data()[i] - dx).abs() < 1e-14);
    }
    assert_eq!(g.get(bi2).unwrap().data(), &c);
}

#[test]
fn backward_errors() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let mut tape = Tape::new(&store);
    let v = tape.param(p);
    assert!(matches!(tape.backward(v), Err(NnError::NotScalar(_))));
    let c = tape.input(Tensor::vector(vec![1.0, 2.0]));
    let s = tape.sum(c);
    assert!(matches!(tape.backward(s), Err(NnError::Detached)));
}

/// Registers `shapes` as random parameters, returning the store.
fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        store.add(*name, random(shape, &mut rng)).unwrap();
    }
    store
}

/// Weighted sum with fixed pseudo-random coefficients, so every output coordinate matters.
fn probe(tape: &mut Tape<'_>, y: tgcritic_core::nn::Var) -> tgcritic_core::nn::Var {
    let n = tape.value(y).len();
    let coeffs: Vec<f64> = (0..n).map(|i| ((i * 7919 % 97) as f64 / 97.0) - 0.4).collect();
    let flat = tape.reshape(y, &[n]).unwrap();
    let w = tape.input(Tensor::new(&[n, 1], coeffs).unwrap());
    let b = tape.input(Tensor::zeros(&[1]));
    let d = tape.dense(flat, w, b).unwrap();
    tape.sum(d)
}

#[test]
fn grad_check_dense() {
    let mut store = store_with(&[("x", &[6]), ("w", &[6, 4]), ("b", &[4])], 10);
    let ids: Vec<_> = store.ids().collect();
    let r = grad_check(&mut store, 1e-5, Coords::All, |t| {
        let (x, w, b) = (t.param(ids[0]), t.param(ids[1]), t.param(ids[2]));
        let y = t.dense(x, w, b)?;
        Ok(probe(t, y))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn grad_check_conv2d() {
    let mut store = store_with(&[("x", &[5, 4, 2]), ("w", &[3, 3, 2, 3]), ("b", &[3])], 11);
    let ids: Vec<_> = store.ids().collect();
    let r = grad_check(&mut store, 1e-5, Coords::All, |t| {
        let (x, w, b) = (t.param(ids[0]), t.param(ids[1]), t.param(ids[2]));
        let y = t.conv2d(x, w, b)?;
        Ok(probe(t, y))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn grad_check_conv1d_and_conv1x1() {
    let mut store = store_with(&[("x", &[7, 3]), ("w", &[5, 3, 2]), ("b", &[2])], 12);
    let ids: Vec<_> = store.ids().collect();
    let r = grad_check(&mut store, 1e-5, Coords::All, |t| {
        let (x, w, b) = (t.param(ids[0]), t.param(ids[1]), t.param(ids[2]));
        let y = t.conv1d(x, w, b)?;
        Ok(probe(t, y))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");

    let mut store = store_with(&[("x", &[3, 4, 5]), ("w", &[1, 1, 5, 2]), ("b", &[2])], 13);
    let ids: Vec<_> = store.ids().collect();
    let r = grad_check(&mut store, 1e-5, Coords::All, |t| {
        let (x, w, b) = (t.param(ids[0]), t.param(ids[1]), t.param(ids[2]));
        let y = t.conv1x1(x, w, b)?;
        Ok(probe(t, y))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn grad_check_shape_ops() {
    let mut store = store_with(&[("x", &[8, 6, 2]), ("y", &[8, 6, 3])], 14);
    let ids: Vec<_> = store.ids().collect();
    let r = grad_check(&mut store, 1e-5, Coords::All, |t| {
        let (x, y) = (t.param(ids[0]), t.param(ids[1]));
        let pooled = t.avg_pool(x, Axis::Time, 4)?;
        let pooled = t.avg_pool(pooled, Axis::Frequency, 2)?;
        let up = t.upsample_nearest(pooled, Axis::Time, 4)?;
        let up = t.upsample_nearest(up, Axis::Frequency, 2)?;
        let cat = t.concat(&[up, y])?;
        let flat = t.reshape(cat, &[48, 5])?;
        let act = t.elu(flat);
        let g = t.global_avg_pool(act)?;
        Ok(probe(t, g))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn grad_check_softmax_cross_entropy() {
    let mut store = store_with(&[("z", &[3])], 15);
    let id = store.ids().next().unwrap();
    for label in 0..3 {
        let r = grad_check(&mut store, 1e-5, Coords::All, |t| {
            let z = t.param(id);
            let p = t.softmax(z)?;
            t.cross_entropy(p, label)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}

#[test]
fn avg_pool_inverts_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&[5, 3, 2], &mut rng);
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let xv = tape.input(x.clone());
    for k in [1, 2, 4, 8] {
        let up = tape.upsample_nearest(xv, Axis::Time, k).unwrap();
        let back = tape.avg_pool(up, Axis::Time, k).unwrap();
        assert_eq!(tape.value(back), &x);
    }
}

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        v in proptest::collection::vec(-50.0f64..50.0, 1..8),
        c in -100.0f64..100.0,
    ) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(Tensor::vector(v.clone()));
        let b = tape.input(Tensor::vector(v.iter().map(|x| x + c).collect()));
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        let pa = tape.value(sa).data();
        prop_assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(pa.iter().all(|&p| p > 0.0 && p <= 1.0));
        for (x, y) in pa.iter().zip(tape.value(sb).data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
