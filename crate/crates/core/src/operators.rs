//! Linear forward models `A` with exact adjoints.
//!
//! Every operator acts on a single `H x W` plane; multi-channel signals
//! (`N x C x H x W`) are mapped plane by plane to measurements of shape
//! `N x C x m`. Random operators are rebuilt bit-identically from
//! `(kind, shape, p or m, seed)`.

use std::fmt;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autodiff::LinearMap;
use crate::error::{invalid, Error, Result};
use crate::tensor::{Element, Tensor};

/// Largest dense ensemble (entries of `m x d`) built without an explicit budget.
pub const DEFAULT_DENSE_BUDGET: usize = 1 << 25;

/// Serializable description from which an operator is rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity,
    /// Keeps `round(p * d)` random pixels.
    Mask {
        p: f64,
        seed: u64,
    },
    /// Dense `N(0, 1) / sqrt(d)` matrix with `round(p * d)` rows.
    Gaussian {
        p: f64,
        seed: u64,
    },
    /// Dense `{-1, +1} / sqrt(d)` matrix with `round(p * d)` rows.
    Bernoulli {
        p: f64,
        seed: u64,
    },
    /// `round(p * d)` random rows of the unitary DFT, real and imaginary parts stacked.
    Fourier {
        p: f64,
        seed: u64,
    },
    /// Anti-aliased bicubic downsampling.
    Bicubic {
        factor: usize,
    },
}

impl OperatorSpec {
    pub fn build(&self, height: usize, width: usize) -> Result<LinearOperator> {
        match *self {
            OperatorSpec::Identity => make_identity(height, width),
            OperatorSpec::Mask { p, seed } => make_mask(height, width, p, seed),
            OperatorSpec::Gaussian { p, seed } => {
                make_gaussian_ensemble(height, width, rows_for(p, height * width)?, seed)
            }
            OperatorSpec::Bernoulli { p, seed } => {
                make_bernoulli_ensemble(height, width, rows_for(p, height * width)?, seed)
            }
            OperatorSpec::Fourier { p, seed } => make_fourier_ensemble(height, width, p, seed),
            OperatorSpec::Bicubic { factor } => make_bicubic_downsample(height, width, factor),
        }
    }

    /// Same operator family with a different random draw.
    pub fn with_seed(&self, seed: u64) -> OperatorSpec {
        match *self {
            OperatorSpec::Mask { p, .. } => OperatorSpec::Mask { p, seed },
            OperatorSpec::Gaussian { p, .. } => OperatorSpec::Gaussian { p, seed },
            OperatorSpec::Bernoulli { p, .. } => OperatorSpec::Bernoulli { p, seed },
            OperatorSpec::Fourier { p, .. } => OperatorSpec::Fourier { p, seed },
            ref other => other.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OperatorSpec::Identity => "identity",
            OperatorSpec::Mask { .. } => "mask",
            OperatorSpec::Gaussian { .. } => "gaussian",
            OperatorSpec::Bernoulli { .. } => "bernoulli",
            OperatorSpec::Fourier { .. } => "fourier",
            OperatorSpec::Bicubic { .. } => "bicubic",
        }
    }

    /// Whether measurements are pixel values (so 8-bit quantization applies).
    pub fn pixel_domain(&self) -> bool {
        matches!(self, OperatorSpec::Identity | OperatorSpec::Mask { .. } | OperatorSpec::Bicubic { .. })
    }
}

fn check_fraction(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid(format!("keep fraction {p} outside (0, 1]")));
    }
    Ok(())
}

fn rows_for(p: f64, d: usize) -> Result<usize> {
    check_fraction(p)?;
    Ok(((p * d as f64).round() as usize).max(1))
}

/// Sparse rows of a 1-D resampling matrix.
type SparseRows = Vec<Vec<(usize, f64)>>;

#[derive(Clone)]
enum Kind {
    Identity,
    Mask { kept: Vec<usize> },
    Dense { matrix: Arc<Vec<f64>>, rows: usize },
    Fourier { rows: Vec<usize>, forward: Arc<dyn Fft<f64>>, inverse: Arc<dyn Fft<f64>> },
    Bicubic { factor: usize, vertical: SparseRows, horizontal: SparseRows },
}

/// A linear map from `H x W` planes to `m`-vectors, with its exact adjoint.
#[derive(Clone)]
pub struct LinearOperator {
    height: usize,
    width: usize,
    spec: OperatorSpec,
    kind: Kind,
}

impl fmt::Debug for LinearOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearOperator")
            .field("spec", &self.spec)
            .field("input", &(self.height, self.width))
            .field("m", &self.measurement_len())
            .finish()
    }
}

fn check_plane(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidShape(vec![height, width]));
    }
    Ok(())
}

pub fn make_identity(height: usize, width: usize) -> Result<LinearOperator> {
    check_plane(height, width)?;
    Ok(LinearOperator { height, width, spec: OperatorSpec::Identity, kind: Kind::Identity })
}

/// Random pixel subset; the measurement is the kept subvector.
pub fn make_mask(height: usize, width: usize, p: f64, seed: u64) -> Result<LinearOperator> {
    check_plane(height, width)?;
    let d = height * width;
    let m = rows_for(p, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = index::sample(&mut rng, d, m).into_vec();
    kept.sort_unstable();
    Ok(LinearOperator { height, width, spec: OperatorSpec::Mask { p, seed }, kind: Kind::Mask { kept } })
}

fn dense(height: usize, width: usize, m: usize, budget: usize, mut entry: impl FnMut() -> f64) -> Result<Kind> {
    check_plane(height, width)?;
    let d = height * width;
    if m == 0 {
        return Err(invalid("dense ensemble needs at least one row"));
    }
    if m.saturating_mul(d) > budget {
        return Err(Error::MemoryBudget { rows: m, cols: d, budget });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let matrix = (0..m * d).map(|_| entry() * scale).collect();
    Ok(Kind::Dense { matrix: Arc::new(matrix), rows: m })
}

fn fraction_of(m: usize, d: usize) -> f64 {
    m as f64 / d as f64
}

/// `m x d` matrix with i.i.d. `N(0, 1)` entries scaled by `1/sqrt(d)`.
pub fn make_gaussian_ensemble(height: usize, width: usize, m: usize, seed: u64) -> Result<LinearOperator> {
    make_gaussian_ensemble_with_budget(height, width, m, seed, DEFAULT_DENSE_BUDGET)
}

pub fn make_gaussian_ensemble_with_budget(
    height: usize,
    width: usize,
    m: usize,
    seed: u64,
    budget: usize,
) -> Result<LinearOperator> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = dense(height, width, m, budget, || StandardNormal.sample(&mut rng))?;
    let p = fraction_of(m, height * width);
    Ok(LinearOperator { height, width, spec: OperatorSpec::Gaussian { p, seed }, kind })
}

/// `m x d` matrix with fair `{-1, +1}` entries scaled by `1/sqrt(d)`.
pub fn make_bernoulli_ensemble(height: usize, width: usize, m: usize, seed: u64) -> Result<LinearOperator> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = dense(height, width, m, DEFAULT_DENSE_BUDGET, || if rng.random_bool(0.5) { 1.0 } else { -1.0 })?;
    let p = fraction_of(m, height * width);
    Ok(LinearOperator { height, width, spec: OperatorSpec::Bernoulli { p, seed }, kind })
}

/// Random rows of the unitary `d`-point DFT of the flattened plane.
/// Measurements are `[Re(F_S x); Im(F_S x)]`, so `m = 2 * round(p * d)`.
pub fn make_fourier_ensemble(height: usize, width: usize, p: f64, seed: u64) -> Result<LinearOperator> {
    check_plane(height, width)?;
    let d = height * width;
    let k = rows_for(p, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = index::sample(&mut rng, d, k).into_vec();
    rows.sort_unstable();
    let mut planner = FftPlanner::new();
    let kind = Kind::Fourier { rows, forward: planner.plan_fft_forward(d), inverse: planner.plan_fft_inverse(d) };
    Ok(LinearOperator { height, width, spec: OperatorSpec::Fourier { p, seed }, kind })
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Resampling weights for shrinking `len` samples by `factor`, with the
/// kernel stretched by `factor` for anti-aliasing and symmetric (edge
/// repeating) boundary handling. Each row sums to one.
fn bicubic_rows(len: usize, factor: usize) -> SparseRows {
    let f = factor as f64;
    let out_len = len / factor;
    let width = 4.0 * f;
    let taps = width.ceil() as isize + 2;
    let period = 2 * len as isize;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * f - 0.5;
            let left = (center - width / 2.0).floor() as isize;
            let mut row: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for t in 0..taps {
                let j = left + t;
                let w = cubic((center - j as f64) / f) / f;
                if w == 0.0 {
                    continue;
                }
                let m = j.rem_euclid(period);
                let src = if m < len as isize { m } else { period - 1 - m } as usize;
                total += w;
                match row.iter_mut().find(|(c, _)| *c == src) {
                    Some(entry) => entry.1 += w,
                    None => row.push((src, w)),
                }
            }
            row.iter_mut().for_each(|e| e.1 /= total);
            row
        })
        .collect()
}

pub fn make_bicubic_downsample(height: usize, width: usize, factor: usize) -> Result<LinearOperator> {
    check_plane(height, width)?;
    if !(2..=4).contains(&factor) {
        return Err(invalid(format!("super-resolution factor {factor} not in {{2, 3, 4}}")));
    }
    if !height.is_multiple_of(factor) || !width.is_multiple_of(factor) {
        return Err(invalid(format!("{height}x{width} is not divisible by factor {factor}")));
    }
    let kind =
        Kind::Bicubic { factor, vertical: bicubic_rows(height, factor), horizontal: bicubic_rows(width, factor) };
    Ok(LinearOperator { height, width, spec: OperatorSpec::Bicubic { factor }, kind })
}

impl LinearOperator {
    pub fn spec(&self) -> &OperatorSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// `d`, the signal dimension of one plane.
    pub fn signal_len(&self) -> usize {
        self.height * self.width
    }

    /// `m`, the measurement dimension of one plane.
    pub fn measurement_len(&self) -> usize {
        match &self.kind {
            Kind::Identity => self.signal_len(),
            Kind::Mask { kept } => kept.len(),
            Kind::Dense { rows, .. } => *rows,
            Kind::Fourier { rows, .. } => 2 * rows.len(),
            Kind::Bicubic { factor, .. } => (self.height / factor) * (self.width / factor),
        }
    }

    /// Spatial shape of the measurement when it is an image.
    pub fn output_image_shape(&self) -> Option<(usize, usize)> {
        match &self.kind {
            Kind::Identity => Some((self.height, self.width)),
            Kind::Bicubic { factor, .. } => Some((self.height / factor, self.width / factor)),
            _ => None,
        }
    }

    /// Measurement of one plane: `out = A x`.
    pub fn apply_plane(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.signal_len());
        assert_eq!(out.len(), self.measurement_len());
        match &self.kind {
            Kind::Identity => out.copy_from_slice(x),
            Kind::Mask { kept } => {
                for (o, &k) in out.iter_mut().zip(kept) {
                    *o = x[k];
                }
            }
            Kind::Dense { matrix, .. } => {
                for (o, row) in out.iter_mut().zip(matrix.chunks_exact(x.len())) {
                    *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            Kind::Fourier { rows, forward, .. } => {
                let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                forward.process(&mut buf);
                let norm = 1.0 / (x.len() as f64).sqrt();
                let k = rows.len();
                for (i, &r) in rows.iter().enumerate() {
                    out[i] = buf[r].re * norm;
                    out[k + i] = buf[r].im * norm;
                }
            }
            Kind::Bicubic { vertical, horizontal, .. } => {
                let ow = horizontal.len();
                let mut tmp = vec![0.0; self.height * ow];
                for y in 0..self.height {
                    let src = &x[y * self.width..(y + 1) * self.width];
                    for (c, row) in horizontal.iter().enumerate() {
                        tmp[y * ow + c] = row.iter().map(|&(j, w)| w * src[j]).sum();
                    }
                }
                out.fill(0.0);
                for (r, row) in vertical.iter().enumerate() {
                    for &(j, w) in row {
                        for c in 0..ow {
                            out[r * ow + c] += w * tmp[j * ow + c];
                        }
                    }
                }
            }
        }
    }

    /// Back-projection of one plane: `out = A^T y`.
    pub fn adjoint_plane(&self, y: &[f64], out: &mut [f64]) {
        assert_eq!(y.len(), self.measurement_len());
        assert_eq!(out.len(), self.signal_len());
        match &self.kind {
            Kind::Identity => out.copy_from_slice(y),
            Kind::Mask { kept } => {
                out.fill(0.0);
                for (&v, &k) in y.iter().zip(kept) {
                    out[k] = v;
                }
            }
            Kind::Dense { matrix, .. } => {
                out.fill(0.0);
                for (&v, row) in y.iter().zip(matrix.chunks_exact(out.len())) {
                    for (o, a) in out.iter_mut().zip(row) {
                        *o += a * v;
                    }
                }
            }
            Kind::Fourier { rows, inverse, .. } => {
                let d = out.len();
                let k = rows.len();
                let mut buf = vec![Complex64::new(0.0, 0.0); d];
                for (i, &r) in rows.iter().enumerate() {
                    buf[r] = Complex64::new(y[i], y[k + i]);
                }
                inverse.process(&mut buf);
                let norm = 1.0 / (d as f64).sqrt();
                for (o, c) in out.iter_mut().zip(&buf) {
                    *o = c.re * norm;
                }
            }
            Kind::Bicubic { vertical, horizontal, .. } => {
                let ow = horizontal.len();
                let mut tmp = vec![0.0; self.height * ow];
                for (r, row) in vertical.iter().enumerate() {
                    for &(j, w) in row {
                        for c in 0..ow {
                            tmp[j * ow + c] += w * y[r * ow + c];
                        }
                    }
                }
                out.fill(0.0);
                for yy in 0..self.height {
                    let dst = &mut out[yy * self.width..(yy + 1) * self.width];
                    for (c, row) in horizontal.iter().enumerate() {
                        let v = tmp[yy * ow + c];
                        for &(j, w) in row {
                            dst[j] += w * v;
                        }
                    }
                }
            }
        }
    }

    fn check_signal<T: Element>(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[2] != self.height || s[3] != self.width {
            return Err(Error::ShapeMismatch {
                op: "operator apply",
                lhs: s.to_vec(),
                rhs: vec![self.height, self.width],
            });
        }
        Ok((s[0], s[1]))
    }

    /// `N x C x H x W` signal to `N x C x m` measurements, plane by plane.
    pub fn apply<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c) = self.check_signal(x)?;
        let (d, m) = (self.signal_len(), self.measurement_len());
        let mut out = Vec::with_capacity(n * c * m);
        let mut src = vec![0.0; d];
        let mut dst = vec![0.0; m];
        for plane in x.data().chunks_exact(d) {
            src.iter_mut().zip(plane).for_each(|(s, v)| *s = v.as_f64());
            self.apply_plane(&src, &mut dst);
            out.extend(dst.iter().map(|&v| T::of(v)));
        }
        Tensor::new([n, c, m], out)
    }

    /// `N x C x m` measurements to `N x C x H x W` back-projections.
    pub fn adjoint<T: Element>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let s = y.shape();
        let (d, m) = (self.signal_len(), self.measurement_len());
        if s.len() != 3 || s[2] != m {
            return Err(Error::ShapeMismatch { op: "operator adjoint", lhs: s.to_vec(), rhs: vec![m] });
        }
        let mut out = Vec::with_capacity(s[0] * s[1] * d);
        let mut src = vec![0.0; m];
        let mut dst = vec![0.0; d];
        for plane in y.data().chunks_exact(m) {
            src.iter_mut().zip(plane).for_each(|(s, v)| *s = v.as_f64());
            self.adjoint_plane(&src, &mut dst);
            out.extend(dst.iter().map(|&v| T::of(v)));
        }
        Tensor::new([s[0], s[1], self.height, self.width], out)
    }

    /// Dense `m x d` matrix of one plane, built column by column.
    pub fn to_matrix(&self) -> Vec<f64> {
        let (d, m) = (self.signal_len(), self.measurement_len());
        let mut mat = vec![0.0; m * d];
        let mut e = vec![0.0; d];
        let mut col = vec![0.0; m];
        for j in 0..d {
            e[j] = 1.0;
            self.apply_plane(&e, &mut col);
            e[j] = 0.0;
            for i in 0..m {
                mat[i * d + j] = col[i];
            }
        }
        mat
    }
}

impl<T: Element> LinearMap<T> for LinearOperator {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x)
    }

    fn transpose(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.adjoint(y)
    }
}
