//! Gaussian measurement model, its log-likelihood gradient and the sigmoid
//! link between the iterate space `eta` and the image space `x = sigmoid(eta)`.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, Var};
use crate::error::{invalid, Error, Result};
use crate::operators::{LinearOperator, OperatorSpec};
use crate::tensor::{Element, Tensor};

/// Default clamp margin used before inverting the link.
pub const DEFAULT_DELTA: f64 = 1e-3;

/// Which gradient the model is fed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradSpace {
    /// Chain rule through the link: `sigmoid'(eta) * grad_x`.
    #[default]
    Eta,
    /// The image-space gradient, unchanged.
    X,
}

/// Simulated measurements of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation<T: Element> {
    /// `N x C x m`.
    pub y: Tensor<T>,
    /// Noise standard deviation of each batch item.
    pub sigma: Vec<f64>,
    pub quantized: bool,
    pub operator: OperatorSpec,
}

impl<T: Element> Observation<T> {
    /// `sigma^2` per batch item as an `[N]` tensor.
    pub fn variance(&self) -> Tensor<T> {
        let v: Vec<T> = self.sigma.iter().map(|s| T::of(s * s)).collect();
        Tensor::new([v.len()], v).expect("variance shape")
    }
}

/// `y = A x + sigma z` with noise drawn from `seed`, optionally rounded to
/// the 8-bit lattice.
pub fn observe<T: Element>(
    op: &LinearOperator,
    x_true: &Tensor<T>,
    sigma: f64,
    seed: u64,
    quantize: bool,
) -> Result<Observation<T>> {
    let n = x_true.shape().first().copied().unwrap_or(0);
    observe_with(op, x_true, &vec![sigma; n], &mut ChaCha8Rng::seed_from_u64(seed), quantize)
}

/// Like [`observe`] with one noise level per batch item and a caller-owned
/// random stream.
pub fn observe_with<T: Element, R: Rng + ?Sized>(
    op: &LinearOperator,
    x_true: &Tensor<T>,
    sigma: &[f64],
    rng: &mut R,
    quantize: bool,
) -> Result<Observation<T>> {
    if sigma.len() != x_true.batch() {
        return Err(invalid(format!("{} noise levels for a batch of {}", sigma.len(), x_true.batch())));
    }
    if sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(invalid("noise level must be finite and non-negative"));
    }
    if quantize && !op.spec().pixel_domain() {
        return Err(invalid(format!("cannot quantize {} measurements", op.spec().name())));
    }
    let mut y = op.apply(x_true)?;
    for (n, &s) in sigma.iter().enumerate() {
        for v in y.item_mut(n) {
            let z: f64 = rng.sample(StandardNormal);
            let mut w = v.as_f64() + s * z;
            if quantize {
                w = crate::metrics::quantize_value(w);
            }
            *v = T::of(w);
        }
    }
    Ok(Observation { y, sigma: sigma.to_vec(), quantized: quantize, operator: op.spec().clone() })
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("stabilizer must be positive, got {eps}")))
    }
}

/// `A^T (y - A x) / (sigma^2 + eps)` per batch item.
pub fn grad_loglik_x<T: Element>(
    op: &LinearOperator,
    obs: &Observation<T>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    check_eps(eps)?;
    let ax = op.apply(x)?;
    let residual = obs.y.zip_map(&ax, "grad_loglik_x", |a, b| a - b)?;
    let mut g = op.adjoint(&residual)?;
    if obs.sigma.len() != g.batch() {
        return Err(Error::ShapeMismatch { op: "grad_loglik_x", lhs: vec![obs.sigma.len()], rhs: g.shape().to_vec() });
    }
    for (n, s) in obs.sigma.iter().enumerate() {
        let k = T::of(1.0 / (s * s + eps));
        g.item_mut(n).iter_mut().for_each(|v| *v *= k);
    }
    Ok(g)
}

/// The image-space gradient pulled back through the link.
pub fn grad_loglik_eta<T: Element>(
    op: &LinearOperator,
    obs: &Observation<T>,
    eta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let gx = grad_loglik_x(op, obs, &link_forward(eta), eps)?;
    link_deriv(eta).zip_map(&gx, "grad_loglik_eta", |d, g| d * g)
}

pub fn link_forward<T: Element>(eta: &Tensor<T>) -> Tensor<T> {
    eta.map(sigmoid)
}

/// Logit of `x` after clipping into `[delta, 1 - delta]`.
pub fn link_inverse<T: Element>(x: &Tensor<T>, delta: f64) -> Result<Tensor<T>> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(invalid(format!("clamp margin must lie in (0, 0.5), got {delta}")));
    }
    let (lo, hi) = (T::of(delta), T::of(1.0 - delta));
    Ok(x.map(|v| {
        let c = v.max(lo).min(hi);
        (c / (T::one() - c)).ln()
    }))
}

pub fn link_deriv<T: Element>(eta: &Tensor<T>) -> Tensor<T> {
    eta.map(|v| {
        let s = sigmoid(v);
        s * (T::one() - s)
    })
}

/// `softplus(phi)`.
pub fn make_eps(phi: f64) -> f64 {
    softplus(phi)
}

/// Starting point `logit(clip(A^T y))`.
pub fn initial_eta<T: Element>(op: &LinearOperator, obs: &Observation<T>, delta: f64) -> Result<Tensor<T>> {
    link_inverse(&op.adjoint(&obs.y)?, delta)
}

/// Graph version of the likelihood gradient used inside the rollout, so that
/// training differentiates through `A`, `A^T` and the stabilizer.
///
/// `variance` is `[N]` (the known `sigma^2`), `phi_eps` the `[1]` stabilizer
/// parameter.
pub fn grad_var<'t, T: Element>(
    op: &Rc<LinearOperator>,
    y: Var<'t, T>,
    variance: Var<'t, T>,
    phi_eps: Var<'t, T>,
    eta: Var<'t, T>,
    space: GradSpace,
) -> Result<Var<'t, T>> {
    let x = eta.sigmoid()?;
    let residual = y.sub(x.linear(op.clone(), false)?)?;
    let back = residual.linear(op.clone(), true)?;
    let n = variance.shape()[0];
    let inv = phi_eps.softplus()?.expand(&[n])?.add(variance)?.recip()?;
    let gx = back.batch_scale(inv)?;
    match space {
        GradSpace::X => Ok(gx),
        GradSpace::Eta => x.sub(x.mul(x)?)?.mul(gx),
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck;
    use crate::operators::{make_gaussian_ensemble, make_identity, make_mask};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn image(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        Tensor::rand_uniform(shape, 0.05, 0.95, &mut rng(seed))
    }

    #[test]
    fn noiseless_identity_returns_signal() {
        let op = make_identity(4, 5).unwrap();
        let x = image([2, 1, 4, 5], 1);
        let obs = observe(&op, &x, 0.0, 3, false).unwrap();
        assert_eq!(obs.y.data(), x.data());
        assert_eq!(obs.sigma, vec![0.0, 0.0]);
    }

    #[test]
    fn quantized_measurements_lie_on_lattice() {
        let op = make_identity(8, 8).unwrap();
        let x = image([1, 1, 8, 8], 2);
        let obs = observe(&op, &x, 25.0 / 255.0, 4, true).unwrap();
        assert!(obs.quantized);
        for v in obs.y.data() {
            let k = v * 255.0;
            assert!((0.0..=255.0).contains(&k));
            assert!((k - k.round()).abs() < 1e-9);
        }
        let dense = make_gaussian_ensemble(8, 8, 32, 1).unwrap();
        assert!(observe(&dense, &x, 0.1, 4, true).is_err());
        assert!(observe(&make_mask(8, 8, 0.5, 1).unwrap(), &x, 0.1, 4, true).is_ok());
    }

    #[test]
    fn noise_has_requested_std() {
        let op = make_identity(100, 100).unwrap();
        let x = Tensor::<f64>::full([1, 1, 100, 100], 0.5);
        let sigma = 0.1;
        let obs = observe(&op, &x, sigma, 9, false).unwrap();
        let n = obs.y.len() as f64;
        let noise: Vec<f64> = obs.y.data().iter().map(|v| v - 0.5).collect();
        let mean = noise.iter().sum::<f64>() / n;
        let std = (noise.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - sigma).abs() < 0.05 * sigma, "std {std}");
        assert!(observe(&op, &x, -1.0, 0, false).is_err());
    }

    #[test]
    fn per_item_noise_levels() {
        let op = make_identity(10, 10).unwrap();
        let x = Tensor::<f64>::full([2, 1, 10, 10], 0.5);
        let obs = observe_with(&op, &x, &[0.0, 0.2], &mut rng(1), false).unwrap();
        assert!(obs.y.item(0).iter().all(|&v| v == 0.5));
        assert!(obs.y.item(1).iter().any(|&v| v != 0.5));
        assert_eq!(obs.variance().data(), &[0.0, 0.04000000000000001]);
        assert!(observe_with(&op, &x, &[0.1], &mut rng(1), false).is_err());
    }

    #[test]
    fn gradient_vanishes_at_truth() {
        let op = make_gaussian_ensemble(4, 4, 8, 3).unwrap();
        let x = image([2, 1, 4, 4], 5);
        let obs = observe(&op, &x, 0.0, 0, false).unwrap();
        let g = grad_loglik_x(&op, &obs, &x, 0.1).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
        let eta = link_inverse(&x, 1e-6).unwrap();
        let ge = grad_loglik_eta(&op, &obs, &eta, 0.1).unwrap();
        assert!(ge.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn identity_closed_form() {
        let op = make_identity(3, 3).unwrap();
        let y = image([1, 1, 3, 3], 6);
        let x = image([1, 1, 3, 3], 7);
        let obs = Observation {
            y: y.reshape([1, 1, 9]).unwrap(),
            sigma: vec![1.0],
            quantized: false,
            operator: OperatorSpec::Identity,
        };
        let g = grad_loglik_x(&op, &obs, &x, 1.0).unwrap();
        for i in 0..9 {
            assert_relative_eq!(g.data()[i], (obs.y.data()[i] - x.data()[i]) / 2.0, epsilon = 1e-15);
        }
        assert!(grad_loglik_x(&op, &obs, &x, 0.0).is_err());
        assert!(grad_loglik_x(&op, &obs, &Tensor::zeros([1, 1, 3, 4]), 1.0).is_err());
    }

    #[test]
    fn eta_space_closed_form() {
        let op = make_identity(2, 2).unwrap();
        let obs = Observation {
            y: Tensor::ones([1, 1, 4]),
            sigma: vec![0.0],
            quantized: false,
            operator: OperatorSpec::Identity,
        };
        // sigma^2 + eps = 1 at eta = 0: 0.25 * (1 - 0.5)
        let g = grad_loglik_eta(&op, &obs, &Tensor::<f64>::zeros([1, 1, 2, 2]), 1.0).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn gradient_is_linear_in_residual() {
        let op = make_gaussian_ensemble(4, 4, 10, 2).unwrap();
        let x = image([1, 1, 4, 4], 8);
        let ax = op.apply(&x).unwrap();
        let r1 = Tensor::<f64>::randn([1, 1, 10], &mut rng(1));
        let r2 = Tensor::<f64>::randn([1, 1, 10], &mut rng(2));
        let grad_for = |r: &Tensor<f64>| {
            let y = ax.zip_map(r, "t", |a, b| a + b).unwrap();
            let obs = Observation { y, sigma: vec![0.3], quantized: false, operator: op.spec().clone() };
            grad_loglik_x(&op, &obs, &x, 0.2).unwrap()
        };
        let combo = r1.zip_map(&r2, "t", |a, b| 2.0 * a - 3.0 * b).unwrap();
        let (g1, g2, gc) = (grad_for(&r1), grad_for(&r2), grad_for(&combo));
        for i in 0..16 {
            assert_relative_eq!(gc.data()[i], 2.0 * g1.data()[i] - 3.0 * g2.data()[i], epsilon = 1e-12);
        }
    }

    fn loglik(op: &LinearOperator, y: &Tensor<f64>, x: &Tensor<f64>, scale: f64) -> f64 {
        let ax = op.apply(x).unwrap();
        -ax.data().iter().zip(y.data()).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / (2.0 * scale)
    }

    #[test]
    fn x_gradient_matches_finite_differences() {
        let op = make_gaussian_ensemble(4, 4, 9, 11).unwrap();
        let x = image([1, 1, 4, 4], 12);
        let obs = observe(&op, &image([1, 1, 4, 4], 13), 0.2, 1, false).unwrap();
        let eps = 0.3;
        let analytic = grad_loglik_x(&op, &obs, &x, eps).unwrap();
        let scale = 0.04 + eps;
        let err = gradcheck::check(&mut |v| loglik(&op, &obs.y, &v[0], scale), &[x], &[analytic]);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn eta_gradient_matches_finite_differences() {
        let op = make_gaussian_ensemble(4, 4, 9, 14).unwrap();
        let eta = Tensor::<f64>::randn([1, 1, 4, 4], &mut rng(15));
        let obs = observe(&op, &image([1, 1, 4, 4], 16), 0.1, 2, false).unwrap();
        let eps = make_eps(0.0);
        let analytic = grad_loglik_eta(&op, &obs, &eta, eps).unwrap();
        let scale = 0.01 + eps;
        let err = gradcheck::check(&mut |v| loglik(&op, &obs.y, &link_forward(&v[0]), scale), &[eta], &[analytic]);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn link_values() {
        let z = Tensor::<f64>::zeros([1]);
        assert_eq!(link_forward(&z).data(), &[0.5]);
        assert_eq!(link_deriv(&z).data(), &[0.25]);
        assert_eq!(link_inverse(&Tensor::full([1], 0.5), DEFAULT_DELTA).unwrap().data(), &[0.0]);
        assert!(link_inverse(&z, 0.0).is_err());
        assert!(link_inverse(&z, -1.0).is_err());

        let x = Tensor::<f64>::from_f64([5], &[1e-3, 0.2, 0.5, 0.77, 1.0 - 1e-3]).unwrap();
        let back = link_forward(&link_inverse(&x, DEFAULT_DELTA).unwrap());
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let clipped = link_forward(&link_inverse(&Tensor::<f64>::from_f64([2], &[-3.0, 7.0]).unwrap(), 0.01).unwrap());
        assert_relative_eq!(clipped.data()[0], 0.01, epsilon = 1e-12);
        assert_relative_eq!(clipped.data()[1], 0.99, epsilon = 1e-12);
    }

    #[test]
    fn saturated_link_kills_gradient() {
        let op = make_identity(1, 2).unwrap();
        let obs = Observation {
            y: Tensor::from_f64([1, 1, 2], &[0.0, 1.0]).unwrap(),
            sigma: vec![0.1],
            quantized: false,
            operator: OperatorSpec::Identity,
        };
        let eta = Tensor::<f64>::from_f64([1, 1, 1, 2], &[40.0, -40.0]).unwrap();
        let g = grad_loglik_eta(&op, &obs, &eta, 0.01).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn stabilizer_values() {
        assert_relative_eq!(make_eps(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(make_eps(5.0), 5.006_715_348_489_118, epsilon = 1e-12);
        assert!(make_eps(-40.0) > 0.0 && make_eps(-40.0) < 1e-17);
        assert!(make_eps(-700.0) >= 0.0);
    }

    #[test]
    fn graph_gradient_matches_reference() {
        let op = Rc::new(make_gaussian_ensemble(4, 4, 7, 21).unwrap());
        let obs = observe_with(&op, &image([2, 1, 4, 4], 22), &[0.05, 0.2], &mut rng(3), false).unwrap();
        let eta = Tensor::<f64>::randn([2, 1, 4, 4], &mut rng(23));
        let phi = Tensor::<f64>::from_f64([1], &[-0.4]).unwrap();
        for space in [GradSpace::Eta, GradSpace::X] {
            let tape = Tape::new();
            let g = grad_var(
                &op,
                tape.constant(obs.y.clone()),
                tape.constant(obs.variance()),
                tape.leaf(phi.clone()),
                tape.leaf(eta.clone()),
                space,
            )
            .unwrap();
            let eps = make_eps(-0.4);
            let expect = match space {
                GradSpace::Eta => grad_loglik_eta(&op, &obs, &eta, eps).unwrap(),
                GradSpace::X => grad_loglik_x(&op, &obs, &link_forward(&eta), eps).unwrap(),
            };
            for (a, b) in g.value().data().iter().zip(expect.data()) {
                assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn graph_gradient_differentiates_through_operator() {
        let op = Rc::new(make_gaussian_ensemble(3, 3, 5, 31).unwrap());
        let obs = observe(&op, &image([1, 1, 3, 3], 32), 0.1, 4, false).unwrap();
        let eta = Tensor::<f64>::randn([1, 1, 3, 3], &mut rng(33));
        let phi = Tensor::<f64>::from_f64([1], &[0.3]).unwrap();
        let weight = Tensor::<f64>::randn([1, 1, 3, 3], &mut rng(34));
        let f = |inputs: &[Tensor<f64>]| -> f64 {
            let tape = Tape::new();
            let g = grad_var(
                &op,
                tape.constant(obs.y.clone()),
                tape.constant(obs.variance()),
                tape.leaf(inputs[1].clone()),
                tape.leaf(inputs[0].clone()),
                GradSpace::Eta,
            )
            .unwrap();
            g.value().dot(&weight)
        };
        let tape = Tape::new();
        let (e, p) = (tape.leaf(eta.clone()), tape.leaf(phi.clone()));
        let g =
            grad_var(&op, tape.constant(obs.y.clone()), tape.constant(obs.variance()), p, e, GradSpace::Eta).unwrap();
        let loss = g.mul(tape.constant(weight.clone())).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = vec![grads.get(e).unwrap().clone(), grads.get(p).unwrap().clone()];
        let err = gradcheck::check(&mut |v| f(v), &[eta, phi], &analytic);
        assert!(err < 1e-3, "{err}");
    }
}
