use octad_core::model::network::LAYER_NORM_EPS;
use octad_core::model::{
    backward, forward, load_params, predict_proba, save_params, softmax, train, weighted_ce_loss,
    year_weight, AdamW, Batch, ModelConfig, ModelError, ParamSet, Sample, SwaAccumulator,
    TrainConfig, TrainState,
};
use octad_core::phantom::{generate_bscan, PhantomSpec};
use octad_core::preprocess::{default_mask_gains, preprocess, ChannelMode, Composite};
use octad_core::store::{Label, Rng};
use proptest::prelude::*;

fn small_config(channels: Vec<usize>, hidden: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        channels,
        hidden,
        dropout,
    }
}

fn random_batch(rng: &mut Rng, c: usize, b: usize, h: usize, w: usize) -> Batch {
    let data = (0..c * b * h * w).map(|_| rng.normal()).collect();
    Batch::from_raw(data, c, b, h, w)
}

/// Perturbs every bias and the layer-norm shift so no unit sits at a kink.
fn randomized(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = Rng::new(seed);
    let mut p = ParamSet::init(cfg, &mut rng);
    for t in &mut p.tensors {
        if !t.name.ends_with(".weight") {
            t.data.iter_mut().for_each(|v| *v += 0.3 * rng.normal());
        }
    }
    p
}

/// Weighted CE over a batch with dropout masks drawn from `mask_seed`.
fn loss_of(p: &ParamSet, x: &Batch, labels: &[usize], weights: &[f64], mask_seed: u64) -> f64 {
    let cache = forward(p, x, true, &mut Rng::new(mask_seed)).unwrap();
    weighted_ce_loss(&cache.logits, labels, weights).unwrap().0
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Central differences on every parameter; returns the worst relative error.
fn fd_check(cfg: &ModelConfig, x: &Batch, seed: u64) -> f64 {
    let p = randomized(cfg, seed);
    let labels: Vec<usize> = (0..x.batch).map(|i| i % 2).collect();
    let weights: Vec<f64> = (0..x.batch).map(|i| 1.0 + 0.25 * i as f64).collect();
    let mask_seed = seed + 100;
    let cache = forward(&p, x, true, &mut Rng::new(mask_seed)).unwrap();
    let (_, dl) = weighted_ce_loss(&cache.logits, &labels, &weights).unwrap();
    let (g, _) = backward(&p, &cache, &dl);
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for (ti, t) in p.tensors.iter().enumerate() {
        for i in 0..t.data.len() {
            let mut plus = p.clone();
            plus.tensors[ti].data[i] += h;
            let mut minus = p.clone();
            minus.tensors[ti].data[i] -= h;
            let numeric = (loss_of(&plus, x, &labels, &weights, mask_seed)
                - loss_of(&minus, x, &labels, &weights, mask_seed))
                / (2.0 * h);
            let e = rel_err(g.tensors[ti].data[i], numeric);
            assert!(
                e < 1e-4,
                "{}[{i}]: analytic {} numeric {numeric}",
                t.name,
                g.tensors[ti].data[i]
            );
            worst = worst.max(e);
        }
    }
    worst
}

#[test]
fn zero_input_gives_zero_logits() {
    let p = ParamSet::init(&ModelConfig::default(), &mut Rng::new(1));
    let x = Batch::from_raw(vec![0.0; 3 * 64 * 64], 3, 1, 64, 64);
    let cache = forward(&p, &x, false, &mut Rng::new(0)).unwrap();
    assert_eq!(cache.logits[0], [0.0, 0.0]);
}

#[test]
fn eval_forward_is_pure() {
    let p = ParamSet::init(&ModelConfig::default(), &mut Rng::new(2));
    let x = random_batch(&mut Rng::new(3), 3, 2, 64, 64);
    let a = forward(&p, &x, false, &mut Rng::new(10)).unwrap().logits;
    let b = forward(&p, &x, false, &mut Rng::new(99)).unwrap().logits;
    assert_eq!(a, b);
    let train_a = forward(&p, &x, true, &mut Rng::new(10)).unwrap().logits;
    assert_ne!(a, train_a);
}

#[test]
fn accepts_other_input_sizes() {
    let p = ParamSet::init(&ModelConfig::default(), &mut Rng::new(2));
    for (h, w) in [(64, 64), (32, 48), (81, 64)] {
        let x = random_batch(&mut Rng::new(3), 3, 1, h, w);
        let l = forward(&p, &x, false, &mut Rng::new(0)).unwrap().logits;
        assert!(l[0].iter().all(|v| v.is_finite()));
    }
}

#[test]
fn rejects_non_finite_input() {
    let p = ParamSet::init(&ModelConfig::default(), &mut Rng::new(2));
    let mut x = random_batch(&mut Rng::new(3), 3, 1, 32, 32);
    x.data[17] = f64::NAN;
    assert!(matches!(
        forward(&p, &x, false, &mut Rng::new(0)),
        Err(ModelError::NonFinite(_))
    ));
}

#[test]
fn year_weight_examples() {
    assert_eq!(year_weight(None, 4.0).unwrap(), 1.0);
    assert_eq!(year_weight(Some(0.0), 4.0).unwrap(), 2.0);
    assert_eq!(year_weight(Some(4.0), 4.0).unwrap(), 1.0);
    assert_eq!(year_weight(Some(2.0), 4.0).unwrap(), 1.5);
    assert_eq!(year_weight(Some(9.0), 4.0).unwrap(), 1.0);
    assert!(matches!(year_weight(Some(-0.5), 4.0), Err(ModelError::NegativeYears(_))));
}

#[test]
fn weighted_loss_hand_computation() {
    // sample 1: logits (0, ln 3), label AD -> p_AD = 3/4, CE = ln(4/3), w = 2
    // sample 2: logits (0, 0), label CN -> CE = ln 2, w = 1
    let logits = [[0.0, 3.0_f64.ln()], [0.0, 0.0]];
    let (loss, _) = weighted_ce_loss(&logits, &[1, 0], &[2.0, 1.0]).unwrap();
    let expected = (2.0 * (4.0_f64 / 3.0).ln() + 2.0_f64.ln()) / 3.0;
    assert!((loss - expected).abs() < 1e-12);
}

#[test]
fn equal_weights_give_mean_ce() {
    let logits = [[0.3, -1.2], [2.0, 0.5], [-0.7, 0.1]];
    let labels = [0, 1, 1];
    let (a, _) = weighted_ce_loss(&logits, &labels, &[1.0; 3]).unwrap();
    let (b, _) = weighted_ce_loss(&logits, &labels, &[5.0; 3]).unwrap();
    let mean: f64 = logits
        .iter()
        .zip(labels)
        .map(|(l, y)| -softmax(l)[y].ln())
        .sum::<f64>()
        / 3.0;
    assert!((a - mean).abs() < 1e-12);
    assert!((b - mean).abs() < 1e-12);
}

#[test]
fn large_margin_loss_vanishes() {
    let (loss, grad) = weighted_ce_loss(&[[-400.0, 400.0]], &[1], &[1.0]).unwrap();
    assert!(loss.abs() < 1e-300);
    assert!(grad[0].iter().all(|g| g.abs() < 1e-300));
    assert!(weighted_ce_loss(&[], &[], &[]).is_err());
}

#[test]
fn finite_differences_single_block() {
    let cfg = small_config(vec![3, 4], 6, 0.4);
    let x = random_batch(&mut Rng::new(7), 3, 2, 8, 8);
    let worst = fd_check(&cfg, &x, 11);
    assert!(worst < 1e-4);
}

#[test]
fn finite_differences_two_blocks_with_dropout() {
    let cfg = small_config(vec![3, 4, 5], 8, 0.3);
    let x = random_batch(&mut Rng::new(8), 3, 3, 9, 7);
    assert!(fd_check(&cfg, &x, 12) < 1e-4);
}

#[test]
fn input_gradient_of_final_activation() {
    // d(logit_1)/dA against perturbations of the final activation, via the
    // head-only evaluation path.
    let cfg = small_config(vec![3, 4, 6], 8, 0.0);
    let p = randomized(&cfg, 21);
    let x = random_batch(&mut Rng::new(22), 3, 1, 12, 12);
    let cache = forward(&p, &x, false, &mut Rng::new(0)).unwrap();
    let (_, d_act) = backward(&p, &cache, &[[0.0, 1.0]]);
    let (act, ho, wo) = cache.final_activation();
    let act = act.to_vec();
    let h = 1e-5;
    for i in 0..act.len() {
        let mut plus = act.clone();
        plus[i] += h;
        let mut minus = act.clone();
        minus[i] -= h;
        let lp = octad_core::model::logits_from_activation(&p, &plus, 1, ho * wo)[0][1];
        let lm = octad_core::model::logits_from_activation(&p, &minus, 1, ho * wo)[0][1];
        let numeric = (lp - lm) / (2.0 * h);
        assert!(rel_err(d_act[i], numeric) < 1e-4, "{i}: {} vs {numeric}", d_act[i]);
    }
}

#[test]
fn layer_norm_eps_is_standard() {
    assert_eq!(LAYER_NORM_EPS, 1e-5);
}

#[test]
fn gradient_is_linear_in_sample_weights() {
    let cfg = small_config(vec![3, 4, 5], 6, 0.0);
    let p = randomized(&cfg, 31);
    let single = random_batch(&mut Rng::new(32), 3, 1, 8, 8);
    let mut doubled = single.data.clone();
    // [C, B, H, W]: interleave the sample twice per channel
    doubled.clear();
    let plane = 64;
    for c in 0..3 {
        let src = &single.data[c * plane..(c + 1) * plane];
        doubled.extend_from_slice(src);
        doubled.extend_from_slice(src);
    }
    let dup = Batch::from_raw(doubled, 3, 2, 8, 8);

    // unnormalized weighted sum: d/dlogits = w * (p - onehot)
    let grads = |x: &Batch, w: &[f64]| {
        let cache = forward(&p, x, false, &mut Rng::new(0)).unwrap();
        let dl: Vec<[f64; 2]> = cache
            .logits
            .iter()
            .zip(w)
            .map(|(l, &wi)| {
                let s = softmax(l);
                [wi * s[0], wi * (s[1] - 1.0)]
            })
            .collect();
        backward(&p, &cache, &dl).0
    };
    let g1 = grads(&single, &[1.5]);
    let g2 = grads(&dup, &[1.5, 1.5]);
    for (a, b) in g1.tensors.iter().zip(&g2.tensors) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{}", a.name);
        }
    }
    // normalized loss: duplicating the batch leaves the gradient unchanged
    let norm = |x: &Batch, w: &[f64]| {
        let cache = forward(&p, x, false, &mut Rng::new(0)).unwrap();
        let labels = vec![1; w.len()];
        let (_, dl) = weighted_ce_loss(&cache.logits, &labels, w).unwrap();
        backward(&p, &cache, &dl).0
    };
    let n1 = norm(&single, &[1.5]);
    let n2 = norm(&dup, &[1.5, 1.5]);
    for (a, b) in n1.tensors.iter().zip(&n2.tensors) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}

fn scalar_params(v: f64) -> ParamSet {
    let cfg = small_config(vec![1, 1], 1, 0.0);
    let mut p = ParamSet::zeros(&cfg);
    p.tensors[0].data[0] = v;
    p
}

#[test]
fn adamw_scalar_oracle() {
    // hand-rolled scalar AdamW over three steps with varying gradients
    let (lr, wd, b1, b2, eps) = (0.1, 0.05, 0.9, 0.999, 1e-8);
    let grads = [1.0, -0.5, 0.25];
    let (mut p, mut m, mut v) = (1.0_f64, 0.0_f64, 0.0_f64);
    let mut params = scalar_params(1.0);
    let mut opt = AdamW::new(&params, lr, wd);
    for (t, &g) in grads.iter().enumerate() {
        let step = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(step));
        let vhat = v / (1.0 - b2.powi(step));
        p = p - lr * wd * p - lr * mhat / (vhat.sqrt() + eps);

        let mut gs = ParamSet::zeros(&params.config);
        gs.tensors[0].data[0] = g;
        opt.step(&mut params, &gs).unwrap();
        assert!((params.tensors[0].data[0] - p).abs() < 1e-15);
    }
}

#[test]
fn adamw_first_step_is_lr_sized() {
    // with bias correction the first update is lr * g / (|g| + eps)
    let mut params = scalar_params(1.0);
    let mut opt = AdamW::new(&params, 0.1, 0.0);
    let mut g = ParamSet::zeros(&params.config);
    g.tensors[0].data[0] = 1.0;
    opt.step(&mut params, &g).unwrap();
    assert!((params.tensors[0].data[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
}

#[test]
fn adamw_decay_only() {
    let start = randomized(&small_config(vec![3, 4], 5, 0.0), 3);
    let zero = ParamSet::zeros(&start.config);

    let mut p = start.clone();
    AdamW::new(&p, 0.1, 0.0).step(&mut p, &zero).unwrap();
    assert_eq!(p, start);

    let mut p = start.clone();
    AdamW::new(&p, 0.1, 0.01).step(&mut p, &zero).unwrap();
    for (a, b) in p.tensors.iter().zip(&start.tensors) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(*x, y - 0.1 * 0.01 * y);
        }
    }
}

#[test]
fn swa_means() {
    let a = randomized(&small_config(vec![3, 4], 5, 0.0), 1);
    let b = randomized(&small_config(vec![3, 4], 5, 0.0), 2);
    let mut acc = SwaAccumulator::new();
    assert!(matches!(acc.finalize(), Err(ModelError::SwaEmpty)));
    for _ in 0..7 {
        acc.update(&a).unwrap();
    }
    assert_eq!(acc.finalize().unwrap(), a);

    let mut acc = SwaAccumulator::new();
    acc.update(&a).unwrap();
    acc.update(&b).unwrap();
    let mean = acc.finalize().unwrap();
    for ((m, x), y) in mean.tensors.iter().zip(&a.tensors).zip(&b.tensors) {
        for i in 0..m.data.len() {
            let expect = (x.data[i] + y.data[i]) / 2.0;
            assert!((m.data[i] - expect).abs() <= 1e-15 * (1.0 + expect.abs()));
        }
    }
}

fn phantom_samples(n_per_class: usize, thinning: f64, size: usize, seed: u64) -> Vec<Sample> {
    let height = (size as f64 * 650.0 / 512.0).round() as usize;
    let mut template = PhantomSpec::with_geometry(height, size);
    template.signal.thinning_fraction = thinning;
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for i in 0..2 * n_per_class {
        let label = if i % 2 == 0 { Label::Ad } else { Label::Cn };
        let scan = generate_bscan(&template.clone().with_class(label), &mut rng).unwrap();
        let composite =
            preprocess(&scan, size, ChannelMode::Composite, &default_mask_gains()).unwrap();
        let years = (label == Label::Ad).then(|| rng.uniform(0.0, 4.0));
        out.push(Sample {
            composite,
            label,
            years_to_diagnosis: years,
        });
    }
    out
}

fn tiny_train_config(epochs: usize, swa: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        epochs,
        swa_start_epoch: swa,
        model: small_config(vec![3, 4, 8], 8, 0.4),
        ..TrainConfig::default()
    }
}

#[test]
fn swa_update_count_over_protocol_epochs() {
    let samples = phantom_samples(1, 0.5, 32, 5);
    let cfg = tiny_train_config(100, 80, 1e-3);
    let mut rng = Rng::new(1);
    let mut state = TrainState::new(&cfg, &mut rng);
    for _ in 0..cfg.epochs {
        state.run_epoch(&cfg, &samples, &mut rng).unwrap();
        let expect = (state.epoch + 1).saturating_sub(cfg.swa_start_epoch);
        assert_eq!(state.swa.count, expect);
    }
    assert_eq!(state.swa.count, 21);
}

#[test]
fn zero_learning_rate_keeps_initialization() {
    let samples = phantom_samples(2, 0.5, 32, 6);
    let cfg = tiny_train_config(4, 2, 0.0);
    let out = train(&cfg, &samples, &mut Rng::new(9)).unwrap();
    let init = ParamSet::init(&cfg.model, &mut Rng::new(9));
    assert_eq!(out, init);
}

#[test]
fn training_is_deterministic() {
    let samples = phantom_samples(3, 0.5, 32, 7);
    let cfg = tiny_train_config(3, 1, 1e-3);
    let a = train(&cfg, &samples, &mut Rng::new(4)).unwrap();
    let b = train(&cfg, &samples, &mut Rng::new(4)).unwrap();
    assert_eq!(a, b);
    let c = train(&cfg, &samples, &mut Rng::new(5)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn training_needs_both_classes() {
    let samples: Vec<Sample> = phantom_samples(2, 0.5, 32, 8)
        .into_iter()
        .filter(|s| s.label == Label::Ad)
        .collect();
    let cfg = tiny_train_config(2, 1, 1e-3);
    assert!(matches!(
        train(&cfg, &samples, &mut Rng::new(1)),
        Err(ModelError::MissingClass)
    ));
}

#[test]
fn strong_signal_is_learned() {
    let samples = phantom_samples(100, 0.5, 64, 10);
    let cfg = TrainConfig {
        epochs: 100,
        swa_start_epoch: 80,
        augment: octad_core::augment::AugmentRanges::for_size(64),
        ..TrainConfig::default()
    };
    let params = train(&cfg, &samples, &mut Rng::new(3)).unwrap();
    let refs: Vec<&Composite> = samples.iter().map(|s| &s.composite).collect();
    let scores = predict_proba(&params, &refs).unwrap();
    let correct = scores
        .iter()
        .zip(&samples)
        .filter(|(s, x)| (**s >= 0.5) == (x.label == Label::Ad))
        .count();
    let acc = correct as f64 / samples.len() as f64;
    assert!(acc > 0.9, "training accuracy {acc}");
}

#[test]
fn bundle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = ParamSet::init(&ModelConfig::default(), &mut Rng::new(12));
    save_params(&p, dir.path()).unwrap();
    let q = load_params(dir.path()).unwrap();
    assert!(p.same_shape(&q));
    for (a, b) in p.tensors.iter().zip(&q.tensors) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }
    // a second save of the loaded set is byte-identical
    let dir2 = tempfile::tempdir().unwrap();
    save_params(&q, dir2.path()).unwrap();
    let r = load_params(dir2.path()).unwrap();
    assert_eq!(q, r);
    std::fs::remove_file(dir.path().join("head.fc2.bias.oct")).unwrap();
    assert!(load_params(dir.path()).is_err());
}

proptest! {
    #[test]
    fn softmax_sums_to_one(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let s = softmax(&[a, b]);
        prop_assert!((s[0] + s[1] - 1.0).abs() < 1e-6);
        prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn loss_non_negative(a in -30.0f64..30.0, b in -30.0f64..30.0, y in 0usize..2, w in 0.1f64..3.0) {
        let (loss, _) = weighted_ce_loss(&[[a, b]], &[y], &[w]).unwrap();
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn year_weight_monotone(y1 in 0.0f64..10.0, y2 in 0.0f64..10.0, cap in 0.5f64..8.0) {
        let (lo, hi) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
        let wl = year_weight(Some(lo), cap).unwrap();
        let wh = year_weight(Some(hi), cap).unwrap();
        prop_assert!(wh <= wl);
        prop_assert!((1.0..=2.0).contains(&wl));
    }
}
