//! Deterministic synthetic images for tests and demonstrations.
//!
//! Dead-leaves images: opaque discs with power-law radii stacked front to
//! back until every pixel is covered. They share the edge and scale
//! statistics of natural images closely enough to train and sanity check
//! restoration models without shipping a dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// `channels x height x width` image with values in `[0, 1]`.
pub fn dead_leaves(channels: usize, height: usize, width: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = height * width;
    let mut data = vec![0.0f32; channels * plane];
    let mut covered = vec![false; plane];
    let mut remaining = plane;
    let extent = height.max(width) as f64;
    let (r_min, r_max) = (1.0f64.max(extent / 64.0), extent / 4.0);
    // at most this many leaves; the rest keeps the last colour
    let mut budget = 20_000usize;
    while remaining > 0 && budget > 0 {
        budget -= 1;
        // density proportional to r^-3 on [r_min, r_max]
        let u: f64 = rng.random();
        let inv = r_min.powi(-2) - u * (r_min.powi(-2) - r_max.powi(-2));
        let r = inv.powf(-0.5);
        let cy = rng.random_range(-r..height as f64 + r);
        let cx = rng.random_range(-r..width as f64 + r);
        let base: f64 = rng.random();
        let colour: Vec<f32> =
            (0..channels).map(|_| (0.8 * base + 0.2 * rng.random::<f64>()).clamp(0.0, 1.0) as f32).collect();
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil().max(0.0) as usize).min(height));
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil().max(0.0) as usize).min(width));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let i = y * width + x;
                if !covered[i] && dy * dy + dx * dx <= r * r {
                    covered[i] = true;
                    remaining -= 1;
                    for (c, &v) in colour.iter().enumerate() {
                        data[c * plane + i] = v;
                    }
                }
            }
        }
    }
    Tensor::new([channels, height, width], data).expect("image shape")
}

/// `count` images seeded `seed, seed + 1, ...`.
pub fn dead_leaves_corpus(count: usize, channels: usize, height: usize, width: usize, seed: u64) -> Vec<Tensor<f32>> {
    (0..count as u64).map(|k| dead_leaves(channels, height, width, seed + k)).collect()
}
