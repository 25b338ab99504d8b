//! Image quality metrics, 8-bit quantization and bootstrap error bars.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tensor::{Element, Tensor};

/// Side of the SSIM window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB, computed over all elements jointly.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr<T: Element>(x: &Tensor<T>, reference: &Tensor<T>, max_val: f64) -> Result<f64> {
    x.check_same_shape(reference, "psnr")?;
    if x.is_empty() {
        return Err(invalid("psnr of an empty tensor"));
    }
    let se: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    let mse = se / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the positions where the window fits.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|t| win[t] * img[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|t| win[t] * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, win: &[f64]) -> f64 {
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, win);
    let mu_b = filter_valid(b, h, w, win);
    let aa = filter_valid(&prod(a, a), h, w, win);
    let bb = filter_valid(&prod(b, b), h, w, win);
    let ab = filter_valid(&prod(a, b), h, w, win);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    total / mu_a.len() as f64
}

/// Mean structural similarity for data in `[0, 1]` with an 11x11 Gaussian
/// window (sigma 1.5). The last two axes are the image plane; leading axes
/// (channels, batch) are averaged.
pub fn ssim<T: Element>(x: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    x.check_same_shape(reference, "ssim")?;
    let s = x.shape();
    if s.len() < 2 {
        return Err(invalid(format!("ssim needs an image, got shape {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let win = gaussian_window();
    let a = x.to_f64_vec();
    let b = reference.to_f64_vec();
    let planes = a.len() / (h * w);
    let total: f64 = a.chunks_exact(h * w).zip(b.chunks_exact(h * w)).map(|(p, q)| ssim_plane(p, q, h, w, &win)).sum();
    Ok(total / planes as f64)
}

/// `round(clip(v, 0, 1) * 255) / 255`.
pub fn quantize_value(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn quantize_8bit<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::of(quantize_value(v.as_f64())))
}

/// Standard deviation of the mean over `n_resamples` bootstrap resamples.
pub fn bootstrap_sem(values: &[f64], n_resamples: usize, seed: u64) -> Result<f64> {
    if values.len() < 2 {
        return Err(invalid("bootstrap needs at least two values"));
    }
    if n_resamples < 2 {
        return Err(invalid("bootstrap needs at least two resamples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let means: Vec<f64> =
        (0..n_resamples).map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64).collect();
    let mean = means.iter().sum::<f64>() / n_resamples as f64;
    let var = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (n_resamples - 1) as f64;
    Ok(var.sqrt())
}

/// Per-image scores with aggregates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ImageScore>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: Option<f64>,
}

/// Number of bootstrap resamples used for report error bars.
pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

impl MetricReport {
    pub fn push(&mut self, image_id: impl Into<String>, psnr: f64, ssim: Option<f64>) {
        self.rows.push(ImageScore { image_id: image_id.into(), psnr, ssim });
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr))
    }

    /// Mean SSIM over images large enough to score.
    pub fn mean_ssim(&self) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter_map(|r| r.ssim).collect();
        (!v.is_empty()).then(|| mean(v.into_iter()))
    }

    /// CSV with header `image_id,psnr,ssim`, one row per image, then `mean`
    /// and bootstrap `sem` rows. Missing values are left empty.
    pub fn to_csv(&self, seed: u64) -> String {
        let mut out = String::from("image_id,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.image_id, fmt(r.psnr), r.ssim.map(fmt).unwrap_or_default());
        }
        let psnrs: Vec<f64> = self.rows.iter().map(|r| r.psnr).collect();
        let ssims: Vec<f64> = self.rows.iter().filter_map(|r| r.ssim).collect();
        let _ = writeln!(out, "mean,{},{}", fmt(self.mean_psnr()), self.mean_ssim().map(fmt).unwrap_or_default());
        let sem = |v: &[f64]| bootstrap_sem(v, BOOTSTRAP_RESAMPLES, seed).map(fmt).unwrap_or_default();
        let _ = writeln!(out, "sem,{},{}", sem(&psnrs), sem(&ssims));
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Fixed six-decimal formatting for CSV output.
pub fn fmt(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.6}")
    }
}
