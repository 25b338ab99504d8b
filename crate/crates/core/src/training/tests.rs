use approx::assert_relative_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;
use crate::models::{Cell, Weights};
use crate::synthetic::dead_leaves;

fn corpus(count: usize, size: usize, seed: u64) -> Vec<(String, Tensor<f32>)> {
    (0..count).map(|k| (format!("img{k:02}"), dead_leaves(1, size, size, seed + k as u64))).collect()
}

fn tiny_model() -> RimConfig {
    RimConfig::with_widths(1, [3, 4, 3])
}

fn tiny_config(updates: usize, seed: u64) -> TrainConfig {
    TrainConfig { val_every: 5, ..TrainConfig::denoise(0.1, 3, 4, updates, seed) }
}

#[test]
fn patch_counts() {
    let one = |h: usize, w: usize, p: usize, s: usize| {
        let img = vec![("a".to_string(), Tensor::<f32>::zeros([1, h, w]))];
        extract_patches(&img, p, s, Split::Train).unwrap().len()
    };
    assert_eq!(one(32, 32, 32, 4), 1);
    assert_eq!(one(36, 36, 32, 4), 4);
    assert_eq!(one(321, 481, 32, 4), 73 * 113);
    assert_eq!(one(321, 481, 32, 4), 8249);
}

#[test]
fn patch_contents_and_manifest() {
    let data: Vec<f32> = (0..2 * 4 * 5).map(|v| v as f32 / 40.0).collect();
    let img = vec![("x".to_string(), Tensor::new([2, 4, 5], data.clone()).unwrap())];
    let ds = extract_patches(&img, 3, 2, Split::Val).unwrap();
    // rows {0}, cols {0, 2}
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.split, Split::Val);
    assert_eq!(ds.sources, vec!["x", "x"]);
    let at = |c: usize, r: usize, col: usize| data[(c * 4 + r) * 5 + col];
    let second = ds.patch(1);
    assert_eq!(second[0], at(0, 0, 2));
    assert_eq!(second[4], at(0, 1, 3));
    assert_eq!(second[9], at(1, 0, 2));
    let b = ds.batch::<f64>(&[1, 0]);
    assert_eq!(b.shape(), &[2, 2, 3, 3]);
    assert_eq!(b.item(0)[0], at(0, 0, 2) as f64);
}

#[test]
fn patch_errors() {
    let small = vec![("s".to_string(), Tensor::<f32>::zeros([1, 8, 8]))];
    assert!(extract_patches(&small, 16, 4, Split::Train).is_err());
    let bright = vec![("b".to_string(), Tensor::<f32>::full([1, 8, 8], 1.5))];
    assert!(extract_patches(&bright, 4, 4, Split::Train).is_err());
    let mixed =
        vec![("g".to_string(), Tensor::<f32>::zeros([1, 8, 8])), ("c".to_string(), Tensor::<f32>::zeros([3, 8, 8]))];
    assert!(extract_patches(&mixed, 4, 4, Split::Train).is_err());
    assert!(extract_patches(&[], 4, 4, Split::Train).is_err());
}

#[test]
fn spread_subset() {
    let ds = extract_patches(&corpus(2, 16, 0), 8, 4, Split::Val).unwrap();
    assert_eq!(ds.len(), 18);
    let sub = ds.spread(6);
    assert_eq!(sub.len(), 6);
    assert_eq!(sub.patch(1), ds.patch(3));
    assert_eq!(ds.spread(100).len(), 18);
}

fn fake_trajectory(truth: &Tensor<f64>, errors: &[f64]) -> Trajectory<f64> {
    let mut xs = vec![Tensor::zeros(truth.shape().to_vec())];
    xs.extend(errors.iter().map(|e| truth.map(|v| v + e)));
    Trajectory { etas: xs.clone(), xs, state: None }
}

#[test]
fn total_loss_examples() {
    let truth = Tensor::<f64>::full([1, 1, 2, 2], 0.5);
    let perfect = fake_trajectory(&truth, &[0.0; 4]);
    assert_eq!(total_loss_value(&perfect, &truth, &[1.0; 4]).unwrap(), 0.0);
    let constant = fake_trajectory(&truth, &[0.1; 4]);
    assert_relative_eq!(total_loss_value(&constant, &truth, &[1.0; 4]).unwrap(), 4.0 * 0.01, epsilon = 1e-12);
    let ramp = fake_trajectory(&truth, &[0.4, 0.3, 0.2, 0.1]);
    assert_relative_eq!(total_loss_value(&ramp, &truth, &[0.0, 0.0, 0.0, 1.0]).unwrap(), 0.01, epsilon = 1e-12);
    assert!(total_loss_value(&ramp, &truth, &[1.0; 3]).is_err());

    let tape = Tape::new();
    let graph =
        GraphTrajectory { etas: vec![], xs: ramp.xs.iter().map(|x| tape.constant(x.clone())).collect(), state: None };
    let w = [0.5, 1.0, 0.0, 2.0];
    let g = total_loss(&graph, tape.constant(truth.clone()), &w).unwrap();
    assert_relative_eq!(g.value().data()[0], total_loss_value(&ramp, &truth, &w).unwrap(), epsilon = 1e-12);
    assert!(total_loss(&graph, tape.constant(truth), &w[..2]).is_err());
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let cfg = RimConfig::with_widths(1, [2, 3, 2]);
    let base = rim_init::<f64>(&cfg, 1).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let start: Vec<Tensor<f64>> = base
        .weights
        .entries()
        .into_iter()
        .map(|t| Tensor::randn(t.shape().to_vec(), &mut r).map(|v| 0.4 * v))
        .collect();
    let op = Rc::new(OperatorSpec::Fourier { p: 0.5, seed: 3 }.build(4, 4).unwrap());
    let truth = Tensor::<f64>::rand_uniform([2, 1, 4, 4], 0.1, 0.9, &mut r);
    let obs = observe_with(&op, &truth, &[0.1, 0.2], &mut r, false).unwrap();
    let eta0 = initial_eta(&op, &obs, 1e-3).unwrap();
    let weights = [0.7, 1.3];
    let run = |w: &[Tensor<f64>], grads: bool| {
        let params = RimParams { config: cfg.clone(), weights: Weights::from_entries(Cell::Rim, w.to_vec()).unwrap() };
        let tape = Tape::new();
        let rim = params.bind(&tape, true);
        let traj = rim
            .rollout(&op, tape.constant(obs.y.clone()), tape.constant(obs.variance()), tape.constant(eta0.clone()), 2)
            .unwrap();
        let loss = total_loss(&traj, tape.constant(truth.clone()), &weights).unwrap();
        let value = loss.value().data()[0];
        let g = grads.then(|| {
            let mut g = tape.backward(loss).unwrap();
            rim.weights.entries().into_iter().map(|v| g.take(*v).unwrap()).collect::<Vec<_>>()
        });
        (value, g)
    };
    let analytic = run(&start, true).1.unwrap();
    let err = gradcheck::check(&mut |w| run(w, false).0, &start, &analytic);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn adam_properties() {
    let mut p = Tensor::<f64>::from_f64([3], &[1.0, -2.0, 0.5]).unwrap();
    let orig = p.clone();
    let mut adam = Adam::new(AdamConfig::default());
    adam.step(&mut [&mut p], &[Tensor::zeros([3])]).unwrap();
    assert_eq!(p, orig);

    let mut adam = Adam::new(AdamConfig::default());
    let g = Tensor::<f64>::from_f64([3], &[3.0, -0.01, 1e-4]).unwrap();
    adam.step(&mut [&mut p], &[g]).unwrap();
    for i in 0..3 {
        let moved = p.data()[i] - orig.data()[i];
        let expect = -1e-3 * g_sign(i);
        assert!((moved - expect).abs() < 1e-5, "{i}: {moved}");
    }
    assert_eq!(adam.steps_taken(), 1);

    let nan = Tensor::<f64>::from_f64([3], &[f64::NAN, 0.0, 0.0]).unwrap();
    assert!(adam.step(&mut [&mut p], &[nan]).is_err());
    assert!(adam.step(&mut [&mut p], &[Tensor::zeros([2])]).is_err());
}

fn g_sign(i: usize) -> f64 {
    [1.0, -1.0, 1.0][i]
}

#[test]
fn global_norm_clipping() {
    let mut g = vec![Tensor::<f64>::from_f64([2], &[6.0, 0.0]).unwrap(), Tensor::from_f64([1], &[8.0]).unwrap()];
    let norm = clip_global_norm(&mut g, 1.0);
    assert_relative_eq!(norm, 10.0);
    assert_relative_eq!(g[0].data()[0], 0.6, epsilon = 1e-12);
    assert_relative_eq!(g[1].data()[0], 0.8, epsilon = 1e-12);
    let before = g.clone();
    clip_global_norm(&mut g, 5.0);
    assert_eq!(g, before);
}

#[test]
fn task_sampler_frequencies() {
    let probs = [0.2, 0.3, 0.5];
    let n = 20_000;
    let mut counts = [0usize; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..n {
        counts[sample_task(&probs, &mut rng)] += 1;
    }
    for (c, p) in counts.iter().zip(probs) {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sd, "{counts:?}");
    }
    assert_eq!(sample_task(&[0.0, 1.0, 0.0], &mut rng), 1);
}

#[test]
fn config_validation() {
    assert!(tiny_config(1, 0).validate().is_ok());
    let bad = [
        TrainConfig { steps: 0, ..tiny_config(1, 0) },
        TrainConfig { loss_weights: Some(vec![1.0; 2]), ..tiny_config(1, 0) },
        TrainConfig { loss_weights: Some(vec![0.0; 3]), ..tiny_config(1, 0) },
        TrainConfig { loss_weights: Some(vec![1.0, -1.0, 1.0]), ..tiny_config(1, 0) },
        TrainConfig { sigmas: vec![], ..tiny_config(1, 0) },
        TrainConfig { learning_rate: 0.0, ..tiny_config(1, 0) },
        TrainConfig { clip_norm: Some(-1.0), ..tiny_config(1, 0) },
        TrainConfig { tasks: vec![], ..tiny_config(1, 0) },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let mut c =
        TrainConfig::mixture(vec![OperatorSpec::Identity, OperatorSpec::Mask { p: 0.5, seed: 0 }], 0.1, 3, 4, 1, 0);
    assert!(c.validate().is_ok());
    c.tasks[0].probability = 0.9;
    assert!(c.validate().is_err());
    let json = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), c);
}

fn datasets(size: usize) -> (PatchDataset, PatchDataset) {
    let train = extract_patches(&corpus(4, 16, 10), size, 4, Split::Train).unwrap();
    let val = extract_patches(&corpus(2, 16, 50), size, 8, Split::Val).unwrap();
    (train, val)
}

#[test]
fn zero_updates_keep_initialisation() {
    let (tr, va) = datasets(8);
    let (p, log) = train::<f32>(&tiny_model(), &tiny_config(0, 3), &tr, &va, None).unwrap();
    assert_eq!(p, rim_init(&tiny_model(), 3).unwrap());
    assert!(log.train.is_empty());
    assert_eq!(log.val.len(), 1);
}

#[test]
fn training_is_deterministic() {
    let (tr, va) = datasets(8);
    let run = |seed| train::<f32>(&tiny_model(), &tiny_config(12, seed), &tr, &va, None).unwrap();
    let (p1, l1) = run(5);
    let (p2, l2) = run(5);
    assert_eq!(p1, p2);
    assert_eq!(l1.val_csv(), l2.val_csv());
    assert_eq!(l1.val.iter().map(|r| r.update).collect::<Vec<_>>(), vec![0, 5, 10, 12]);
    assert_eq!(l1.train.len(), 12);
    let (p3, _) = run(6);
    assert_ne!(p1, p3);
    let csv = l1.train_csv();
    assert!(csv.starts_with("update_index,task,loss,wall_time\n1,identity,"));
    assert!(l1.val_csv().starts_with("update_index,psnr_mean\n0,"));
}

#[test]
fn training_rejects_bad_inputs() {
    let (tr, va) = datasets(8);
    let three = RimConfig::with_widths(3, [3, 4, 3]);
    assert!(train::<f32>(&three, &tiny_config(1, 0), &tr, &va, None).is_err());
    let other = rim_init::<f32>(&RimConfig::with_widths(1, [2, 4, 3]), 0).unwrap();
    assert!(train::<f32>(&tiny_model(), &tiny_config(1, 0), &tr, &va, Some(other)).is_err());
}

#[test]
fn nan_parameters_report_divergence() {
    let (tr, va) = datasets(8);
    let mut p = rim_init::<f32>(&tiny_model(), 0).unwrap();
    p.weights.conv_in.bias.data_mut()[0] = f32::NAN;
    let cfg = TrainConfig { val_every: 1000, ..tiny_config(3, 0) };
    let empty_val = va.spread(0);
    match train::<f32>(&tiny_model(), &cfg, &tr, &empty_val, Some(p)) {
        Err(Error::Diverged { update: 1, .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn validation_set_is_fixed() {
    let (_, va) = datasets(8);
    let tasks = [OperatorSpec::Identity, OperatorSpec::Gaussian { p: 0.5, seed: 0 }];
    let a = ValidationSet::<f32>::build(&va, &tasks, &[0.1, 0.2], false, 7).unwrap();
    let b = ValidationSet::<f32>::build(&va, &tasks, &[0.1, 0.2], false, 7).unwrap();
    assert_eq!(a.len(), va.len());
    for (x, y) in a.groups.iter().zip(&b.groups) {
        assert_eq!(x.obs, y.obs);
    }
    assert_eq!(a.groups[0].task, "identity");
    assert_eq!(a.groups[0].obs.sigma[..2], [0.1, 0.1]);
    let p = rim_init::<f32>(&tiny_model(), 0).unwrap();
    let curve = a.psnr_curve(&p, 3).unwrap();
    assert_eq!(curve.len(), 4);
    assert_eq!(curve, b.psnr_curve(&p, 3).unwrap());
}

/// Smoke test of the optimiser on a small model: over the first 100 updates
/// the batch loss falls for the large majority of seeds.
#[test]
fn loss_decreases_for_most_seeds() {
    let (tr, va) = datasets(8);
    let none = va.spread(0);
    let model = RimConfig::with_widths(1, [4, 8, 4]);
    let mut improved = 0;
    for seed in 0..100 {
        let cfg = TrainConfig { learning_rate: 3e-3, val_every: 1000, ..TrainConfig::denoise(0.1, 3, 4, 100, seed) };
        let (_, log) = train::<f32>(&model, &cfg, &tr, &none, None).unwrap();
        let mean = |rows: &[TrainRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
        if mean(&log.train[80..]) < mean(&log.train[..20]) {
            improved += 1;
        }
    }
    assert!(improved >= 80, "{improved} of 100 seeds improved");
}
