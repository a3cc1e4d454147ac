use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{check_gradients, GradCheck, Tensor};
use crate::face3dmm::{tests::random_basis, VertexLoss};

fn small_config() -> A2epConfig {
    A2epConfig {
        d_model: 8,
        cross_heads: 2,
        ffn_width: 12,
        self_heads: 2,
        k_exp: 3,
        n_identities: 2,
        max_t: 16,
        n_mels: 5,
        ..A2epConfig::default()
    }
}

fn random_features(t_a: usize, c: usize, rng: &mut ChaCha8Rng) -> AudioFeatures {
    AudioFeatures {
        frames: Tensor::from_fn(&[t_a, c], |_| rng.gen_range(-2.0..2.0)),
        sample_rate: SAMPLE_RATE,
        hop: HOP,
    }
}

fn randomize(model: &mut A2epModel, rng: &mut ChaCha8Rng) {
    for t in model.params_mut().tensors_mut() {
        *t = Tensor::from_fn(t.shape(), |_| rng.gen_range(-0.6..0.6));
    }
}

#[test]
fn fresh_model_predicts_zeros() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = A2epModel::new(A2epConfig::default(), 7).unwrap();
    for t in [1, 5, 23] {
        let feats = random_features(40, N_MELS, &mut rng);
        let hist = Tensor::from_fn(&[t, 64], |_| rng.gen_range(-1.0..1.0));
        let out = model.forward(&feats, &hist, 0).unwrap();
        assert_eq!(out.shape(), &[t, 64]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        let ar = model.infer_autoregressive(&feats, 0, t).unwrap();
        assert!(ar.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn zero_fc_leaves_identity_plus_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = A2epModel::new(small_config(), 3).unwrap();
    let store = model.params_mut();
    let i = store.position("expr.w").unwrap();
    store.tensors_mut()[i] = Tensor::zeros(&[3, 8]);
    let hist = Tensor::from_fn(&[6, 3], |_| rng.gen_range(-1.0..1.0));
    let got = model.expression_input(&hist, 1).unwrap();
    let table = model.params().get("id.embed").unwrap();
    let pe = positional_encoding(6, 8);
    for t in 0..6 {
        for c in 0..8 {
            assert_eq!(got.at(t, c), table.at(1, c) + pe.at(t, c));
        }
    }
}

#[test]
fn identities_change_the_encoding() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = A2epModel::new(small_config(), 4).unwrap();
    let hist = Tensor::from_fn(&[7, 3], |_| rng.gen_range(-1.0..1.0));
    let a = model.encode_expressions(&hist, 0).unwrap();
    let b = model.encode_expressions(&hist, 1).unwrap();
    assert_eq!(a.shape(), &[7, 8]);
    assert_ne!(a, b);
    assert!(model.encode_expressions(&hist, 2).is_err());
}

fn layer_norm(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().sum::<f64>() / c as f64;
        let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / c as f64;
        for j in 0..c {
            out.data_mut()[r * c + j] = (row[j] - m) / (v + 1e-5).sqrt();
        }
    }
    out
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i])
}

fn add_row(a: &Tensor, r: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |i| a.data()[i] + r.data()[i % r.len()])
}

fn attention_loop(q: &Tensor, k: &Tensor, v: &Tensor, allowed: impl Fn(usize, usize) -> bool, heads: usize) -> Tensor {
    let (t, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let mut out = Tensor::zeros(&[t, d]);
    for h in 0..heads {
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| {
                    if allowed(i, j) {
                        (0..dh).map(|c| q.at(i, h * dh + c) * k.at(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                out.data_mut()[i * d + h * dh + c] = (0..t).map(|j| e[j] / z * v.at(j, h * dh + c)).sum();
            }
        }
    }
    out
}

#[test]
fn forward_matches_hand_assembled_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = small_config();
    let mut model = A2epModel::new(cfg.clone(), 6).unwrap();
    randomize(&mut model, &mut rng);
    let t = 3;
    let audio = Tensor::from_fn(&[t, cfg.n_mels], |_| rng.gen_range(-1.0..1.0));
    let hist = Tensor::from_fn(&[t, cfg.k_exp], |_| rng.gen_range(-1.0..1.0));
    let got = model.forward_prepared(&audio, &hist, 1).unwrap();

    let p = |n: &str| model.params().get(n).unwrap().clone();
    let mm = |a: &Tensor, b: &str| a.matmul(&p(b)).unwrap();
    let a = add_row(&mm(&audio, "audio.w"), &p("audio.b"));
    let idv = Tensor::from_fn(&[cfg.d_model], |c| p("id.embed").at(1, c));
    let e = add(
        &add_row(&add_row(&mm(&hist, "expr.w"), &p("expr.b")), &idv),
        &positional_encoding(t, cfg.d_model),
    );
    let sa = attention_loop(
        &mm(&e, "self.wq"),
        &mm(&e, "self.wk"),
        &mm(&e, "self.wv"),
        |i, j| j <= i,
        2,
    );
    let x1 = layer_norm(&add(&e, &sa.matmul(&p("self.wo")).unwrap()));
    let ca = attention_loop(
        &mm(&x1, "cross.wq"),
        &mm(&a, "cross.wk"),
        &mm(&a, "cross.wv"),
        |i, j| i == j,
        2,
    );
    let x2 = layer_norm(&add(&x1, &ca.matmul(&p("cross.wo")).unwrap()));
    let f = add_row(&mm(&x2, "ffn.w1"), &p("ffn.b1")).map(f64::tanh);
    let x3 = layer_norm(&add(&x2, &add_row(&mm(&f, "ffn.w2"), &p("ffn.b2"))));
    let want = add_row(&mm(&x3, "head.w"), &p("head.b"));
    for (g, w) in got.data().iter().zip(want.data()) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn later_history_does_not_affect_earlier_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = A2epModel::new(small_config(), 8).unwrap();
    randomize(&mut model, &mut rng);
    let audio = Tensor::from_fn(&[9, 5], |_| rng.gen_range(-1.0..1.0));
    let hist = Tensor::from_fn(&[9, 3], |_| rng.gen_range(-1.0..1.0));
    let base = model.forward_prepared(&audio, &hist, 0).unwrap();
    for edit in 1..9 {
        let mut h2 = hist.clone();
        for v in &mut h2.data_mut()[edit * 3..] {
            *v += 1.0;
        }
        let out = model.forward_prepared(&audio, &h2, 0).unwrap();
        assert_eq!(&out.data()[..edit * 3], &base.data()[..edit * 3]);
    }
}

#[test]
fn autoregressive_matches_teacher_forcing_on_own_history() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (s1, s2) in [(0, 1), (1, 2)] {
        let cfg = A2epConfig {
            sigma1: s1,
            sigma2: s2,
            ..small_config()
        };
        let mut model = A2epModel::new(cfg, 10).unwrap();
        randomize(&mut model, &mut rng);
        let feats = random_features(30, 5, &mut rng);
        let ar = model.infer_autoregressive(&feats, 1, 8).unwrap();
        let tf = model.forward(&feats, &teacher_history(&ar), 1).unwrap();
        for (a, b) in ar.data().iter().zip(tf.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let one = model.infer_autoregressive(&feats, 1, 1).unwrap();
        let direct = model.forward(&feats, &Tensor::zeros(&[1, 3]), 1).unwrap();
        assert_eq!(one, direct);
    }
}

#[test]
fn sequence_longer_than_max_t_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = A2epModel::new(small_config(), 0).unwrap();
    let feats = random_features(30, 5, &mut rng);
    assert!(model.infer_autoregressive(&feats, 0, 17).is_err());
}

fn tiny_batch(model: &A2epModel, rng: &mut ChaCha8Rng) -> Vec<PreparedSample> {
    (0..2)
        .map(|i| {
            let s = A2epSample {
                features: random_features(12, 5, rng),
                betas: Tensor::from_fn(&[4, 3], |_| rng.gen_range(-0.5..0.5)),
                identity: i,
            };
            model.prepare(&s).unwrap()
        })
        .collect()
}

#[test]
fn full_graph_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = A2epConfig {
        sigma1: 1,
        sigma2: 2,
        ..small_config()
    };
    let mut model = A2epModel::new(cfg, 13).unwrap();
    randomize(&mut model, &mut rng);
    let batch = tiny_batch(&model, &mut rng);
    let basis = random_basis(6, 2, 3, 2, 14);
    let mouth = basis.lower_mouth_indices(0.0);
    let loss = VertexLoss::new(&basis, &mouth, 1.8).unwrap();
    let report = check_gradients(&GradCheck::default(), model.params().tensors(), |tape, vars| {
        model.batch_loss_on(tape, vars, &batch, &loss)
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn every_parameter_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = A2epConfig {
        sigma1: 1,
        sigma2: 2,
        ..small_config()
    };
    let basis = random_basis(6, 2, 3, 2, 17);
    let mouth = basis.lower_mouth_indices(0.0);
    let samples: Vec<A2epSample> = (0..2)
        .map(|i| A2epSample {
            features: random_features(12, 5, &mut rng),
            betas: Tensor::from_fn(&[4, 3], |_| rng.gen_range(-0.5..0.5)),
            identity: i,
        })
        .collect();
    // the zero head blocks every upstream gradient until it has moved once
    let train = A2epTrainConfig {
        steps: 1,
        lr: 1e-2,
        ..A2epTrainConfig::default()
    };
    let (trained, _) = train_a2ep(&samples, &basis, &mouth, &cfg, &train).unwrap();
    let batch: Vec<_> = samples.iter().map(|s| trained.prepare(s).unwrap()).collect();
    let loss = VertexLoss::new(&basis, &mouth, 1.8).unwrap();
    let (_, grads) = trained.loss_and_gradients(&batch, &loss).unwrap();
    for (name, g) in trained.params().names().iter().zip(&grads) {
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} has no gradient");
    }
}

#[test]
fn training_is_reproducible_and_rejects_empty_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let cfg = small_config();
    let basis = random_basis(6, 2, 3, 2, 19);
    let mouth = basis.lower_mouth_indices(0.0);
    let samples = vec![A2epSample {
        features: random_features(12, 5, &mut rng),
        betas: Tensor::from_fn(&[4, 3], |_| rng.gen_range(-0.5..0.5)),
        identity: 0,
    }];
    let train = A2epTrainConfig {
        steps: 5,
        lr: 1e-3,
        ..A2epTrainConfig::default()
    };
    let (a, la) = train_a2ep(&samples, &basis, &mouth, &cfg, &train).unwrap();
    let (b, lb) = train_a2ep(&samples, &basis, &mouth, &cfg, &train).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(la.last() < la.initial());
    assert!(train_a2ep(&[], &basis, &mouth, &cfg, &train).is_err());
}

#[test]
fn masked_key_rows_never_reach_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut model = A2epModel::new(small_config(), 21).unwrap();
    randomize(&mut model, &mut rng);
    let t = 6;
    let audio = Tensor::from_fn(&[t, 5], |_| rng.gen_range(-1.0..1.0));
    let hist = Tensor::from_fn(&[t, 3], |_| rng.gen_range(-1.0..1.0));
    let base = model.forward_prepared(&audio, &hist, 0).unwrap();
    // with the diagonal window, audio row j only feeds output row j
    for j in 0..t {
        let mut a2 = audio.clone();
        for v in &mut a2.data_mut()[j * 5..(j + 1) * 5] {
            *v += rng.gen_range(-3.0..3.0);
        }
        let out = model.forward_prepared(&a2, &hist, 0).unwrap();
        for i in (0..t).filter(|&i| i != j) {
            assert_eq!(out.row(i), base.row(i));
        }
    }
}

#[test]
fn checkpoint_records_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut model = A2epModel::new(small_config(), 23).unwrap();
    randomize(&mut model, &mut rng);
    let feats = random_features(10, 5, &mut rng);
    model.fit_audio_normalization([&feats]).unwrap();
    let back = A2epModel::from_named(&model.to_named()).unwrap();
    assert_eq!(back, model);
}
