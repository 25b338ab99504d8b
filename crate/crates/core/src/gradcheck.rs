//! Central finite-difference oracle for checking analytic gradients.
//!
//! Only forward evaluations of the objective are used, so the oracle is
//! independent of the reverse pass it checks.

use crate::tensor::Tensor;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Magnitude below which errors are measured absolutely.
pub const FLOOR: f64 = 1e-6;

/// Numerical gradient of `f` with respect to every input tensor.
pub fn numerical_gradient(
    f: &mut dyn FnMut(&[Tensor<f64>]) -> f64,
    inputs: &[Tensor<f64>],
    step: f64,
) -> Vec<Tensor<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = f(&work);
            work[i].data_mut()[j] = orig - step;
            let minus = f(&work);
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Elementwise `|a - n| / max(|a|, |n|, FLOOR)`, maximised over all entries.
pub fn max_relative_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let denom = x.abs().max(y.abs()).max(FLOOR);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Runs the finite-difference oracle and compares against `analytic`.
pub fn check(f: &mut dyn FnMut(&[Tensor<f64>]) -> f64, inputs: &[Tensor<f64>], analytic: &[Tensor<f64>]) -> f64 {
    let numeric = numerical_gradient(f, inputs, STEP);
    max_relative_error(analytic, &numeric)
}
