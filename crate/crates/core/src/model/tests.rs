use super::*;
use crate::phantom::{generate_phantom, PhantomConfig};
use crate::pgs::{fit_gmm, label_pgs, GmmConfig};
use crate::seed::rng_for;
use ndarray::Array3;
use rand_distr::StandardNormal;

fn mprage(ti: f64) -> SequenceParams {
    SequenceParams::mprage(ti, 800.0).unwrap()
}

fn small_config() -> MlpConfig {
    MlpConfig {
        hidden: vec![6, 5, 4],
        dropout: vec![0.05, 0.5, 0.5],
        physics: true,
        heteroscedastic: true,
        mc_loss_samples: 3,
        lambda_strat: 0.7,
    }
}

/// Two acquisitions x three voxel positions, fixed dropout and noise.
fn small_problem(model: &Model, seed: u64) -> Problem {
    let mut rng = rng_for(seed, &[]);
    let (items, positions) = (2, 3);
    let n = items * positions;
    let x = Array2::from_shape_fn((n, NEIGHBOURHOOD), |_| rng.random_range(-1.0..2.0));
    Problem {
        input: BatchInput {
            x,
            item: (0..n).map(|r| r / positions).collect(),
            params: vec![mprage(700.0), SequenceParams::spgr(30.0, 5.0, 20.0).unwrap()],
        },
        labels: (0..n).map(|r| r % 3).collect(),
        masks: Some(shared_masks(&model.config, positions, items, &mut rng)),
        noise: Some(Array3::from_shape_fn((n, model.config.mc_loss_samples, 3), |_| {
            rng.sample(StandardNormal)
        })),
        strat_positions: Some(positions),
    }
}

fn finite_difference_errors(model: &Model, problem: &Problem) -> Vec<(String, f64)> {
    let (_, grads) = loss_and_grad(model, problem).unwrap();
    let h = 1e-4;
    let mut out = Vec::new();
    let names: Vec<String> = grads.tensors().into_iter().map(|(n, _)| n).collect();
    for (ti, name) in names.iter().enumerate() {
        let analytic = grads.tensors()[ti].1.to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for k in 0..analytic.len() {
            let mut plus = model.clone();
            plus.weights.tensors_mut()[ti].1[k] += h;
            let mut minus = model.clone();
            minus.weights.tensors_mut()[ti].1[k] -= h;
            let lp = evaluate_loss(&plus, problem).unwrap().total;
            let lm = evaluate_loss(&minus, problem).unwrap().total;
            numeric[k] = (lp - lm) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
        out.push((name.clone(), diff / scale));
    }
    out
}

#[test]
fn gradients_match_finite_differences() {
    let model = Model::new(small_config(), &mut rng_for(3, &[])).unwrap();
    assert!(model.weights.n_params() >= 100);
    let problem = small_problem(&model, 4);
    for (name, err) in finite_difference_errors(&model, &problem) {
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn gradients_match_without_heteroscedastic_head() {
    let cfg = MlpConfig {
        heteroscedastic: false,
        hidden: vec![5, 4],
        dropout: vec![0.0, 0.5],
        ..small_config()
    };
    let model = Model::new(cfg, &mut rng_for(5, &[])).unwrap();
    let mut problem = small_problem(&model, 6);
    problem.noise = None;
    for (name, err) in finite_difference_errors(&model, &problem) {
        if name.starts_with("sigma") {
            continue;
        }
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
    let (_, g) = loss_and_grad(&model, &problem).unwrap();
    assert!(g.sigma.w.iter().chain(g.sigma.b.iter()).all(|&v| v == 0.0));
}

#[test]
fn baseline_ignores_parameters_and_embedding() {
    let cfg = MlpConfig {
        physics: false,
        ..MlpConfig::default()
    };
    let model = Model::new(cfg, &mut rng_for(7, &[])).unwrap();
    let f = [0.3; NEIGHBOURHOOD];
    let a = forward(&model, &f, &mprage(600.0), None).unwrap();
    let b = forward(&model, &f, &SequenceParams::spgr(20.0, 4.0, 10.0).unwrap(), None).unwrap();
    assert_eq!(a, b);

    let phys = Model::new(MlpConfig::default(), &mut rng_for(7, &[])).unwrap();
    let a = forward(&phys, &f, &mprage(600.0), None).unwrap();
    let b = forward(&phys, &f, &mprage(1800.0), None).unwrap();
    assert_ne!(a.0, b.0);

    let mut problem = small_problem(&model, 8);
    problem.noise = None;
    problem.masks = Some(shared_masks(&model.config, 3, 2, &mut rng_for(9, &[])));
    let (_, g) = loss_and_grad(&model, &problem).unwrap();
    for d in &g.embed {
        assert!(d.w.iter().chain(d.b.iter()).all(|&v| v == 0.0));
    }
}

#[test]
fn zero_weights_give_uniform_softmax() {
    let mut model = Model::new(MlpConfig::default(), &mut rng_for(1, &[])).unwrap();
    for (_, t) in model.weights.tensors_mut() {
        t.fill(0.0);
    }
    let (logits, sigma, _) = forward(&model, &[1.0; NEIGHBOURHOOD], &mprage(900.0), None).unwrap();
    for p in softmax(&logits) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((sigma - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn sigma_stays_positive_for_very_negative_head() {
    let mut model = Model::new(MlpConfig::default(), &mut rng_for(1, &[])).unwrap();
    model.weights.sigma.w.fill(0.0);
    model.weights.sigma.b.fill(-1000.0);
    let (_, sigma, _) = forward(&model, &[1.0; NEIGHBOURHOOD], &mprage(900.0), None).unwrap();
    assert!(sigma >= SIGMA_FLOOR && sigma > 0.0);
}

#[test]
fn forward_is_deterministic_without_dropout() {
    let model = Model::new(MlpConfig::default(), &mut rng_for(2, &[])).unwrap();
    let f: [f64; NEIGHBOURHOOD] = std::array::from_fn(|i| i as f64 / 27.0);
    let a = forward(&model, &f, &mprage(800.0), None).unwrap();
    let b = forward(&model, &f, &mprage(800.0), None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn non_finite_activation_reports_layer() {
    let mut model = Model::new(MlpConfig::default(), &mut rng_for(2, &[])).unwrap();
    model.weights.hidden[1].b[0] = f64::NAN;
    let err = forward(&model, &[1.0; NEIGHBOURHOOD], &mprage(800.0), None).unwrap_err();
    assert!(matches!(err, Error::NonFiniteActivation(2)), "{err}");
}

#[test]
fn featurize_contract() {
    let g = Grid3::filled([5, 5, 5], [1.0; 3], 2.5);
    assert!(featurize(&g, [2, 2, 2]).unwrap().iter().all(|&v| v == 2.5));
    let ramp = Grid3::from_fn([4, 4, 4], [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f32);
    let f = featurize(&ramp, [1, 1, 1]).unwrap();
    assert_eq!(f[0], 0.0);
    assert_eq!(f[1], 1.0);
    assert_eq!(f[3], 10.0);
    assert_eq!(f[9], 100.0);
    assert_eq!(f, featurize(&ramp, [1, 1, 1]).unwrap());
    let mut swapped = f;
    swapped.swap(0, 26);
    assert_ne!(f, swapped);
    assert!(featurize(&ramp, [0, 1, 1]).is_err());
    assert!(featurize(&ramp, [1, 3, 1]).is_err());
}

#[test]
fn heteroscedastic_loss_limits() {
    let mut rng = rng_for(10, &[]);
    for _ in 0..100 {
        let logits: [f64; 3] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let label = rng.random_range(0..3);
        let ce = cross_entropy(&logits, label);
        let h = loss_heteroscedastic(&logits, SIGMA_FLOOR, label, 7, &mut rng);
        assert!((h - ce).abs() < 1e-6);
        let shifted = logits.map(|v| v + 3.7);
        let eps = [[0.3, -1.2, 0.8], [1.1, 0.2, -0.4]];
        let a = heteroscedastic_with_noise(&logits, 0.9, label, &eps).0;
        let b = heteroscedastic_with_noise(&shifted, 0.9, label, &eps).0;
        assert!((a - b).abs() < 1e-12);
    }
    let l = loss_heteroscedastic(&[0.0; 3], 0.5, 1, 1000, &mut rng_for(20, &[]));
    assert!((l / 3f64.ln() - 1.0).abs() < 0.02, "{l}");
}

#[test]
fn stratification_loss_cases() {
    let v = vec![1.0, -2.0, 0.5];
    assert_eq!(loss_stratification(&[v.clone(), v.clone(), v.clone()]), 0.0);
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let mean_sq = v.iter().map(|x| x * x).sum::<f64>() / 3.0;
    assert!((loss_stratification(&[v.clone(), neg.clone()]) - mean_sq).abs() < 1e-15);
    let a = vec![vec![0.1, 0.2], vec![0.5, -0.3], vec![1.0, 0.0]];
    let b = vec![a[2].clone(), a[0].clone(), a[1].clone()];
    assert!((loss_stratification(&a) - loss_stratification(&b)).abs() < 1e-15);
    assert_eq!(loss_stratification(&[v]), 0.0);
}

#[test]
fn total_loss_combination() {
    assert_eq!(total_loss(0.8, 5.0, 0.0), 0.8);
    assert!(total_loss(0.8, 2.0, 0.1) > total_loss(0.8, 1.0, 0.1));
    let model = Model::new(small_config(), &mut rng_for(11, &[])).unwrap();
    let t = evaluate_loss(&model, &small_problem(&model, 12)).unwrap();
    assert!(t.total.is_finite() && t.stratification > 0.0);
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let model = Model::new(small_config(), &mut rng_for(13, &[])).unwrap();
    let (_, g) = loss_and_grad(&model, &small_problem(&model, 14)).unwrap();
    let mut w = model.weights.clone();
    let mut v = w.zeros_like();
    train::sgd_step(&mut w, &mut v, &g, 0.0, 0.9);
    assert_eq!(w, model.weights);
}

#[test]
fn dropout_mean_matches_expectation() {
    // One hidden layer with positive activations: inverted dropout leaves the
    // expected logits equal to the dropout-free logits.
    let cfg = MlpConfig {
        hidden: vec![32],
        dropout: vec![0.5],
        physics: false,
        ..MlpConfig::default()
    };
    let mut model = Model::new(cfg, &mut rng_for(15, &[])).unwrap();
    model.weights.hidden[0].w.fill(0.01);
    model.weights.hidden[0].b.fill(0.1);
    model.weights.out.w.fill(0.2);
    model.weights.out.b.fill(0.0);
    let f = [1.0; NEIGHBOURHOOD];
    let p = mprage(900.0);
    let (exact, _, _) = forward(&model, &f, &p, None).unwrap();
    let mut rng = rng_for(16, &[]);
    let mut mean = [0.0; 3];
    for _ in 0..1000 {
        let m = sample_masks(&model.config, 1, &mut rng);
        let (l, _, _) = forward(&model, &f, &p, Some(&m)).unwrap();
        for c in 0..3 {
            mean[c] += l[c] / 1000.0;
        }
    }
    for c in 0..3 {
        assert!((mean[c] / exact[c] - 1.0).abs() < 0.02, "{mean:?} vs {exact:?}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(small_config(), &mut rng_for(17, &[])).unwrap();
    let stem = dir.path().join("m");
    save_checkpoint(&model, &stem, serde_json::json!({"seed": 17})).unwrap();
    let (back, meta) = load_checkpoint(dir.path().join("m.ckpt.json")).unwrap();
    assert_eq!(back, model);
    assert_eq!(meta["seed"], 17);
    std::fs::write(dir.path().join("m.ckpt.raw"), [0u8; 16]).unwrap();
    assert!(matches!(load_checkpoint(&stem), Err(Error::PayloadLength { .. })));
}

fn toy_subjects(n: usize, dims: usize, seed: u64) -> Vec<LabelledSubject> {
    let cfg = PhantomConfig::default();
    (0..n)
        .map(|i| {
            let (mpm, _) = generate_phantom(seed + i as u64, [dims; 3], &cfg, 30.0, &format!("s{i}")).unwrap();
            let fit = fit_gmm(&mpm, &cfg.tissue_params, &GmmConfig::default()).unwrap();
            let (soft, _) = label_pgs(&mpm, &fit.gmm).unwrap();
            LabelledSubject::new(mpm, soft).unwrap()
        })
        .collect()
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        patch_size: 16,
        voxels_per_patch: 128,
        steps_per_epoch: 50,
        max_epochs: 4,
        patience: 4,
        n_val_params: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn toy_training_improves_and_is_reproducible() {
    let subjects = toy_subjects(2, 24, 100);
    let cfg = toy_config();
    let (m1, log) = train(&cfg, &subjects[..1], &subjects[1..]).unwrap();
    assert_eq!(log.epochs.len(), 4);
    let first = log.epochs[0].loss.segmentation;
    let best = log.epochs[log.best_epoch - 1].loss.segmentation;
    assert!(best < first, "{first} -> {best}");
    let (m2, _) = train(&cfg, &subjects[..1], &subjects[1..]).unwrap();
    assert_eq!(m1, m2);

    let dir = tempfile::tempdir().unwrap();
    log.write_csv(&dir.path().join("log.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert!(text.starts_with("epoch,loss_seg,loss_strat,loss_total,dice_csf"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn patience_stops_after_non_improving_epoch() {
    let subjects = toy_subjects(2, 20, 200);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        patience: 1,
        max_epochs: 5,
        steps_per_epoch: 2,
        ..toy_config()
    };
    let (_, log) = train(&cfg, &subjects[..1], &subjects[1..]).unwrap();
    assert_eq!(log.epochs.len(), 2);
    assert!(log.stopped_early);
    assert_eq!(log.best_epoch, 1);
}

#[test]
fn prediction_contract() {
    let subjects = toy_subjects(1, 20, 300);
    let model = Model::new(MlpConfig::default(), &mut rng_for(18, &[])).unwrap();
    let s = &subjects[0];
    let p = mprage(900.0);
    let mut rng = rng_for(19, &[]);
    let a = predict_mpm(&model, &s.mpm, &p, &McConfig::deterministic(), &mut rng).unwrap();
    let b = predict_mpm(&model, &s.mpm, &p, &McConfig::deterministic(), &mut rng).unwrap();
    assert_eq!(a, b);
    for i in s.mpm.mask_indices() {
        let sum: f32 = a[0].probabilities(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
    assert_eq!(McConfig::default().n_samples, 50);
    let mc = McConfig { dropout: true, logit_noise: false, n_samples: 3 };
    let samples = predict_mpm(&model, &s.mpm, &p, &mc, &mut rng).unwrap();
    assert_eq!(samples.len(), 3);
    assert_ne!(samples[0], samples[1]);
}

#[test]
fn modes_parse_and_configure() {
    for m in TrainMode::ALL {
        assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
    }
    assert!("nope".parse::<TrainMode>().is_err());
    let cfg = TrainConfig {
        mode: TrainMode::Baseline,
        ..TrainConfig::default()
    };
    assert!(!cfg.model_config().physics);
    assert!(TrainMode::PhysStratAug.stratified() && TrainMode::PhysStratAug.on_the_fly());
    assert!(!TrainMode::Phys.stratified() && !TrainMode::Phys.on_the_fly());
}
