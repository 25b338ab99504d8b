use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;
use crate::likelihood::{grad_loglik_eta, grad_loglik_x, link_inverse, observe, observe_with};
use crate::operators::{make_gaussian_ensemble, make_identity, OperatorSpec};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny(layout: Layout, cell: Cell) -> RimConfig {
    RimConfig { layout, ..RimConfig::with_widths(1, [2, 3, 2]) }.with_cell(cell)
}

const ALL: [(Layout, Cell); 6] = [
    (Layout::Strided, Cell::Rim),
    (Layout::Strided, Cell::Gdn),
    (Layout::Strided, Cell::Ffn),
    (Layout::Dilated, Cell::Rim),
    (Layout::Dilated, Cell::Gdn),
    (Layout::Dilated, Cell::Ffn),
];

/// Random weights and biases so that every parameter carries signal.
fn noisy_params(cfg: &RimConfig, seed: u64) -> RimParams<f64> {
    let mut r = rng(seed);
    let base = rim_init::<f64>(cfg, seed).unwrap();
    RimParams {
        config: cfg.clone(),
        weights: base.weights.map(cfg.cell, |t| {
            let n = Tensor::<f64>::randn(t.shape().to_vec(), &mut r);
            n.map(|v| 0.4 * v)
        }),
    }
}

fn zero_params(cfg: &RimConfig) -> RimParams<f64> {
    let base = rim_init::<f64>(cfg, 0).unwrap();
    RimParams { config: cfg.clone(), weights: base.weights.map(cfg.cell, |t| Tensor::zeros(t.shape().to_vec())) }
}

#[test]
fn init_is_deterministic() {
    let cfg = RimConfig::desk(1);
    let a = rim_init::<f32>(&cfg, 5).unwrap();
    assert_eq!(a, rim_init::<f32>(&cfg, 5).unwrap());
    assert_ne!(a, rim_init::<f32>(&cfg, 6).unwrap());
    for (spec, t) in cfg.param_specs().iter().zip(a.weights.entries()) {
        assert_eq!(spec.shape, t.shape());
        match spec.fan_in {
            None => assert!(t.data().iter().all(|&v| v == 0.0), "{}", spec.name),
            Some(f) => {
                let bound = 1.0 / (f as f32).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound));
                assert!(t.data().iter().any(|&v| v != 0.0));
            }
        }
    }
    assert!(rim_init::<f32>(&RimConfig::with_widths(1, [0, 4, 4]), 0).is_err());
}

#[test]
fn widths_and_parameter_counts() {
    assert_eq!(RimConfig::standard(1).widths, [64, 256, 64]);
    assert_eq!(RimConfig::desk(1).widths, [16, 64, 16]);
    let dilated = RimConfig::dilated(1);
    assert_eq!(dilated.dilation_schedule(), [1, 2, 4, 1]);
    let n = dilated.param_count();
    assert!((400_000..=600_000).contains(&n), "{n}");
    assert_eq!(n, rim_init::<f32>(&dilated, 0).unwrap().param_count());
    for cfg in [RimConfig::desk(1), RimConfig::standard(3), RimConfig::dilated(1)] {
        let ffn = cfg.clone().with_cell(Cell::Ffn).param_count();
        let gdn = cfg.clone().with_cell(Cell::Gdn).param_count();
        assert!(ffn < cfg.param_count());
        assert!(gdn < cfg.param_count());
    }
    // conv_in 2*16*9+16, gates 128*80*9+128, candidate 64*80*9+64,
    // transpose 64*16*9+16, out 16*9+1, phi_eps
    assert_eq!(RimConfig::desk(1).param_count(), 304 + 92_288 + 46_144 + 9_232 + 145 + 1);
}

#[test]
fn named_round_trip() {
    let cfg = RimConfig::desk(1).with_cell(Cell::Ffn);
    let p = rim_init::<f32>(&cfg, 3).unwrap();
    let named: Vec<(String, Tensor<f32>)> = p.named().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    assert_eq!(named[0].0, "conv_in.weight");
    assert_eq!(named.last().unwrap().0, "phi_eps");
    assert_eq!(RimParams::from_named(&cfg, named.clone()).unwrap(), p);
    let mut renamed = named.clone();
    renamed[1].0 = "bias".into();
    assert!(RimParams::from_named(&cfg, renamed).is_err());
    assert!(RimParams::from_named(&RimConfig::desk(1), named.clone()).is_err());
    let mut reshaped = named;
    reshaped[1].1 = Tensor::zeros([3]);
    assert!(RimParams::from_named(&cfg, reshaped).is_err());
    assert_eq!(p.cast::<f64>().cast::<f32>(), p);
}

#[test]
fn config_serde_round_trip() {
    let cfg = RimConfig::dilated(3).with_cell(Cell::Gdn);
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<RimConfig>(&json).unwrap(), cfg);
    let minimal = r#"{"channels":1,"layout":"strided","cell":"rim","widths":[16,64,16]}"#;
    assert_eq!(serde_json::from_str::<RimConfig>(minimal).unwrap(), RimConfig::desk(1));
    let extra = r#"{"channels":1,"layout":"strided","cell":"rim","widths":[16,64,16],"depth":3}"#;
    assert!(serde_json::from_str::<RimConfig>(extra).is_err());
}

#[test]
fn zero_parameters_leave_the_estimate_unchanged() {
    for (layout, cell) in ALL {
        let cfg = tiny(layout, cell);
        let p = zero_params(&cfg);
        let tape = Tape::new();
        let rim = p.bind(&tape, false);
        let grad = tape.constant(Tensor::randn([2, 1, 5, 6], &mut rng(1)));
        let eta = tape.constant(Tensor::randn([2, 1, 5, 6], &mut rng(2)));
        let state = rim.initial_state(2, 5, 6);
        let (delta, _) = rim.increment(grad, eta, state).unwrap();
        assert!(delta.value().data().iter().all(|&v| v == 0.0), "{layout:?} {cell:?}");
    }
}

#[test]
fn step_entry_points_check_the_cell() {
    let cfg = tiny(Layout::Strided, Cell::Rim);
    let p = noisy_params(&cfg, 1);
    let tape = Tape::new();
    let rim = p.bind(&tape, false);
    let x = tape.constant(Tensor::randn([1, 1, 4, 4], &mut rng(3)));
    let s = rim.initial_state(1, 4, 4).unwrap();
    assert_eq!(s.shape(), vec![1, 3, 2, 2]);
    let (eta, s2) = rim.rim_step(x, x, s).unwrap();
    assert_eq!(eta.shape(), vec![1, 1, 4, 4]);
    assert_eq!(s2.shape(), s.shape());
    assert!(rim.gdn_step(x, s).is_err());
    assert!(rim.ffn_step(x, x).is_err());
    assert!(rim.increment(x, x, None).is_err());
    let wrong = tape.constant(Tensor::zeros([1, 2, 4, 4]));
    assert!(rim.rim_step(wrong, wrong, s).is_err());
    let other = tape.constant(Tensor::zeros([1, 1, 4, 6]));
    assert!(rim.rim_step(x, other, s).is_err());
}

#[test]
fn fully_convolutional_in_image_size() {
    let cfg = RimConfig::desk(1);
    let p = rim_init::<f32>(&cfg, 0).unwrap();
    for (h, w) in [(32, 32), (128, 128), (15, 17)] {
        let tape = Tape::new();
        let rim = p.bind(&tape, false);
        let x = tape.constant(Tensor::rand_uniform([1, 1, h, w], -1.0, 1.0, &mut rng(4)));
        let s = rim.initial_state(1, h, w).unwrap();
        let (eta, _) = rim.rim_step(x, x, s).unwrap();
        assert_eq!(eta.shape(), vec![1, 1, h, w]);
    }
}

#[test]
fn gdn_ignores_the_estimate() {
    let rim_cfg = tiny(Layout::Strided, Cell::Rim);
    let gdn_cfg = tiny(Layout::Strided, Cell::Gdn);
    let rim_p = noisy_params(&rim_cfg, 7);
    // same weights with the estimate channel removed
    let mut gdn_w = rim_p.weights.clone();
    let w = &rim_p.weights.conv_in.weight;
    let (f1, k2) = (w.shape()[0], 9);
    let sliced: Vec<f64> = (0..f1).flat_map(|o| w.data()[o * 2 * k2..o * 2 * k2 + k2].to_vec()).collect();
    gdn_w.conv_in.weight = Tensor::new([f1, 1, 3, 3], sliced).unwrap();
    let gdn_p = RimParams { config: gdn_cfg, weights: gdn_w };
    assert_eq!(gdn_p.config.param_specs()[0].shape, vec![f1, 1, 3, 3]);

    let run = |eta_value: Tensor<f64>| {
        let tape = Tape::new();
        let (r, g) = (rim_p.bind(&tape, false), gdn_p.bind(&tape, false));
        let grad = tape.constant(Tensor::randn([1, 1, 4, 4], &mut rng(8)));
        let eta = tape.constant(eta_value);
        let (re, _) = r.rim_step(grad, eta, r.initial_state(1, 4, 4).unwrap()).unwrap();
        let (gd, _) = g.gdn_step(grad, g.initial_state(1, 4, 4).unwrap()).unwrap();
        let rim_delta = re.sub(eta).unwrap().value();
        let gd = gd.value();
        rim_delta.data().iter().zip(gd.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    assert!(run(Tensor::zeros([1, 1, 4, 4])) < 1e-12);
    // a single non-zero estimate pixel already changes the increment
    let mut one = Tensor::zeros([1, 1, 4, 4]);
    one.data_mut()[5] = 1.0;
    assert!(run(one) > 1e-6);
}

#[test]
fn ffn_is_stateless() {
    let cfg = tiny(Layout::Strided, Cell::Ffn);
    let p = noisy_params(&cfg, 9);
    let tape = Tape::new();
    let rim = p.bind(&tape, false);
    assert!(rim.initial_state(1, 4, 4).is_none());
    let g = tape.constant(Tensor::randn([1, 1, 4, 4], &mut rng(10)));
    let e = tape.constant(Tensor::randn([1, 1, 4, 4], &mut rng(11)));
    let first = rim.ffn_step(g, e).unwrap().value();
    let _ = rim.ffn_step(e, g).unwrap();
    assert_eq!(rim.ffn_step(g, e).unwrap().value(), first);
}

fn problem(seed: u64, n: usize, h: usize, w: usize) -> (Rc<LinearOperator>, Tensor<f64>, Observation<f64>) {
    let op = Rc::new(make_gaussian_ensemble(h, w, h * w / 2 + 1, seed).unwrap());
    let x = Tensor::rand_uniform([n, 1, h, w], 0.1, 0.9, &mut rng(seed + 1));
    let sigmas: Vec<f64> = (0..n).map(|i| 0.05 + 0.1 * i as f64).collect();
    let obs = observe_with(&op, &x, &sigmas, &mut rng(seed + 2), false).unwrap();
    (op, x, obs)
}

/// Worst relative error between reverse-mode and central differences for a
/// `steps` rollout, over every parameter and the starting point.
fn rollout_gradcheck(cfg: &RimConfig, steps: usize, seed: u64) -> f64 {
    let p = noisy_params(cfg, seed);
    let (op, x_true, obs) = problem(seed, 2, 4, 4);
    let eta0 = Tensor::<f64>::randn([2, 1, 4, 4], &mut rng(seed + 3));
    let loss_of = |weights: &[Tensor<f64>], analytic: bool| {
        let tape = Tape::new();
        let params =
            RimParams { config: cfg.clone(), weights: Weights::from_entries(cfg.cell, weights[1..].to_vec()).unwrap() };
        let rim = params.bind(&tape, true);
        let e0 = tape.leaf(weights[0].clone());
        let traj = rim.rollout(&op, tape.constant(obs.y.clone()), tape.constant(obs.variance()), e0, steps).unwrap();
        let target = tape.constant(x_true.clone());
        let mut loss = traj.xs[1].mse(target).unwrap();
        for x in &traj.xs[2..] {
            loss = loss.add(x.mse(target).unwrap()).unwrap();
        }
        let value = loss.value().data()[0];
        let grads = analytic.then(|| {
            let g = tape.backward(loss).unwrap();
            let mut out = vec![g.get(e0).unwrap().clone()];
            out.extend(rim.weights.entries().into_iter().map(|v| g.get(*v).unwrap().clone()));
            out
        });
        (value, grads)
    };
    let mut inputs = vec![eta0];
    inputs.extend(p.weights.entries().into_iter().cloned());
    let analytic = loss_of(&inputs, true).1.unwrap();
    gradcheck::check(&mut |v| loss_of(v, false).0, &inputs, &analytic)
}

#[test]
fn one_step_cell_matches_finite_differences() {
    for (layout, cell) in ALL {
        let err = rollout_gradcheck(&tiny(layout, cell), 1, 20);
        assert!(err < 1e-3, "{layout:?} {cell:?}: {err}");
    }
}

#[test]
fn three_step_bptt_matches_finite_differences() {
    for (layout, cell) in [(Layout::Strided, Cell::Rim), (Layout::Dilated, Cell::Rim), (Layout::Strided, Cell::Gdn)] {
        let err = rollout_gradcheck(&tiny(layout, cell), 3, 30);
        assert!(err < 1e-3, "{layout:?} {cell:?}: {err}");
    }
    let x_space = RimConfig { grad_space: GradSpace::X, ..tiny(Layout::Strided, Cell::Rim) };
    assert!(rollout_gradcheck(&x_space, 3, 31) < 1e-3);
}

#[test]
fn rollout_lengths_and_range() {
    let cfg = tiny(Layout::Strided, Cell::Rim);
    let p = rim_init::<f64>(&cfg, 40).unwrap();
    let (op, _, obs) = problem(41, 2, 6, 6);
    for steps in [1, 20, 40] {
        let traj = rim_rollout(&p, &op, &obs, steps, None).unwrap();
        assert_eq!(traj.len(), steps + 1);
        assert_eq!(traj.etas.len(), steps + 1);
        for x in &traj.xs {
            assert!(x.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
    assert!(rim_rollout(&p, &op, &obs, 0, None).is_err());
}

#[test]
fn default_start_is_clipped_back_projection() {
    let cfg = tiny(Layout::Strided, Cell::Rim);
    let p = zero_params(&cfg);
    let (op, _, obs) = problem(42, 1, 4, 4);
    let traj = rim_rollout(&p, &op, &obs, 1, None).unwrap();
    let expect = link_inverse(&op.adjoint(&obs.y).unwrap(), cfg.delta).unwrap();
    assert_eq!(traj.etas[0], expect);
    assert_eq!(traj.etas[1], expect);
}

#[test]
fn graph_and_tape_free_rollouts_agree() {
    for (layout, cell) in ALL {
        let cfg = tiny(layout, cell);
        let p = noisy_params(&cfg, 50);
        let (op, _, obs) = problem(51, 2, 6, 6);
        let traj = rim_rollout(&p, &op, &obs, 4, None).unwrap();
        let tape = Tape::new();
        let rim = p.bind(&tape, false);
        let eta0 = tape.constant(traj.etas[0].clone());
        let g = rim.rollout(&op, tape.constant(obs.y.clone()), tape.constant(obs.variance()), eta0, 4).unwrap();
        for t in 0..5 {
            assert_eq!(*g.xs[t].value(), traj.xs[t]);
        }
    }
}

#[test]
fn earlier_steps_ignore_later_ones() {
    let cfg = tiny(Layout::Strided, Cell::Rim);
    let p = noisy_params(&cfg, 60);
    let (op, _, obs) = problem(61, 1, 4, 4);
    let short = rim_rollout(&p, &op, &obs, 2, None).unwrap();
    let long = rim_rollout(&p, &op, &obs, 5, None).unwrap();
    assert_eq!(short.xs[..], long.xs[..3]);
}

#[test]
fn perfect_start_sees_zero_gradient() {
    let op = Rc::new(make_identity(4, 4).unwrap());
    let x = Tensor::<f64>::rand_uniform([1, 1, 4, 4], 0.1, 0.9, &mut rng(70));
    let obs = observe(&op, &x, 0.0, 0, false).unwrap();
    let cfg = tiny(Layout::Strided, Cell::Rim);
    let eta0 = link_inverse(&x, 1e-6).unwrap();
    let traj = rim_rollout(&zero_params(&cfg), &op, &obs, 5, Some(eta0)).unwrap();
    for eta in &traj.etas {
        let g = grad_loglik_eta(&op, &obs, eta, 0.5).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn classical_step_closed_form() {
    let op = make_identity(3, 3).unwrap();
    let y = Tensor::<f64>::rand_uniform([1, 1, 9], 0.0, 1.0, &mut rng(80));
    let obs = Observation { y: y.clone(), sigma: vec![0.0], quantized: false, operator: OperatorSpec::Identity };
    let x = Tensor::<f64>::rand_uniform([1, 1, 3, 3], 0.0, 1.0, &mut rng(81));
    let g = grad_loglik_x(&op, &obs, &x, 1.0).unwrap();
    let next = classical_map_step(&x, &g, |t| Tensor::zeros(t.shape().to_vec()), 1.0).unwrap();
    for (a, b) in next.data().iter().zip(y.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

/// Solves `M z = b` for symmetric positive definite `M` by Cholesky.
fn cholesky_solve(m: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                l[i * n + i] = (m[i * n + i] - s).sqrt();
            } else {
                l[i * n + j] = (m[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * z[k]).sum();
        z[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (z[i] - s) / l[i * n + i];
    }
    x
}

#[test]
fn gradient_ascent_reaches_ridge_solution() {
    let (h, w, m, lambda) = (8, 8, 32, 0.1);
    let d = h * w;
    let op = make_gaussian_ensemble(h, w, m, 90).unwrap();
    let x_true = Tensor::<f64>::rand_uniform([1, 1, h, w], 0.0, 1.0, &mut rng(91));
    let sigma = 0.1;
    let obs = observe(&op, &x_true, sigma, 92, false).unwrap();
    let eps = 1.0 - sigma * sigma;
    let scale = sigma * sigma + eps;

    let a = op.to_matrix();
    let mut gram = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            gram[i * d + j] = (0..m).map(|k| a[k * d + i] * a[k * d + j]).sum::<f64>() / scale;
        }
        gram[i * d + i] += lambda;
    }
    let rhs: Vec<f64> = (0..d).map(|i| (0..m).map(|k| a[k * d + i] * obs.y.data()[k]).sum::<f64>() / scale).collect();
    let ridge = cholesky_solve(&gram, &rhs, d);

    // step below 2 / L with L bounded by the Gram trace
    let trace: f64 = (0..d).map(|i| gram[i * d + i]).sum();
    let gamma = 1.0 / trace.min(4.0);
    let mut x = Tensor::<f64>::zeros([1, 1, h, w]);
    let rel = |x: &Tensor<f64>| {
        let num: f64 = x.data().iter().zip(&ridge).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = ridge.iter().map(|b| b * b).sum();
        (num / den).sqrt()
    };
    let mut iters = 0;
    while rel(&x) > 1e-5 && iters < 5000 {
        let g = grad_loglik_x(&op, &obs, &x, eps).unwrap();
        x = classical_map_step(&x, &g, |t| t.map(|v| -lambda * v), gamma).unwrap();
        iters += 1;
    }
    assert!(rel(&x) <= 1e-5, "relative error {} after {iters} iterations", rel(&x));
}

#[test]
fn trained_weights_transfer_across_operators() {
    // the same parameters run against any operator without reshaping
    let cfg = RimConfig::desk(1);
    let p = rim_init::<f32>(&cfg, 1).unwrap();
    let x = Tensor::<f32>::rand_uniform([1, 1, 16, 16], 0.1, 0.9, &mut rng(100));
    for spec in
        [OperatorSpec::Identity, OperatorSpec::Mask { p: 0.2, seed: 1 }, OperatorSpec::Fourier { p: 0.5, seed: 2 }]
    {
        let op = Rc::new(spec.build(16, 16).unwrap());
        let obs = observe(&op, &x, 0.1, 3, false).unwrap();
        let traj = rim_rollout(&p, &op, &obs, 2, None).unwrap();
        assert_eq!(traj.last().shape(), &[1, 1, 16, 16]);
    }
}
