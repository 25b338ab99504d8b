//! Patch datasets, the weighted trajectory loss, Adam and the
//! backpropagation-through-time training loop.

use std::fmt::Write as _;
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::likelihood::{initial_eta, observe_with, Observation};
use crate::metrics::{fmt, psnr};
use crate::models::{rim_init, rim_rollout, GraphTrajectory, RimConfig, RimParams, Trajectory};
use crate::operators::{LinearOperator, OperatorSpec};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Square `C x P x P` patches with values in `[0, 1]`, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    pub channels: usize,
    pub size: usize,
    pub split: Split,
    /// Source image of every patch.
    pub sources: Vec<String>,
    data: Vec<f32>,
}

/// All `size x size` windows on a `stride` grid. Each image is `C x H x W`
/// with a name used in the manifest.
pub fn extract_patches(
    images: &[(String, Tensor<f32>)],
    size: usize,
    stride: usize,
    split: Split,
) -> Result<PatchDataset> {
    if size == 0 || stride == 0 {
        return Err(invalid("patch size and stride must be positive"));
    }
    let channels = match images.first() {
        Some((_, t)) if t.shape().len() == 3 => t.shape()[0],
        Some((name, t)) => return Err(invalid(format!("image {name} has shape {:?}, expected C x H x W", t.shape()))),
        None => return Err(invalid("no images to extract patches from")),
    };
    let mut data = Vec::new();
    let mut sources = Vec::new();
    for (name, img) in images {
        let s = img.shape();
        if s.len() != 3 || s[0] != channels {
            return Err(invalid(format!("image {name} has shape {s:?}, expected {channels} channels")));
        }
        let (h, w) = (s[1], s[2]);
        if h < size || w < size {
            return Err(invalid(format!("image {name} ({h}x{w}) is smaller than the {size}x{size} patch")));
        }
        if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid(format!("image {name} has values outside [0, 1]")));
        }
        for r in (0..=h - size).step_by(stride) {
            for c in (0..=w - size).step_by(stride) {
                for ch in 0..channels {
                    for i in 0..size {
                        let start = (ch * h + r + i) * w + c;
                        data.extend_from_slice(&img.data()[start..start + size]);
                    }
                }
                sources.push(name.clone());
            }
        }
    }
    Ok(PatchDataset { channels, size, split, sources, data })
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    fn patch_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let n = self.patch_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// `B x C x P x P` batch of the given patches.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.patch_len());
        for &i in indices {
            data.extend(self.patch(i).iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new([indices.len(), self.channels, self.size, self.size], data).expect("batch shape")
    }

    /// `count` patches spread evenly over the dataset (all of them if fewer).
    pub fn spread(&self, count: usize) -> PatchDataset {
        let n = self.len();
        let idx: Vec<usize> = if count >= n { (0..n).collect() } else { (0..count).map(|k| k * n / count).collect() };
        let mut data = Vec::with_capacity(idx.len() * self.patch_len());
        for &i in &idx {
            data.extend_from_slice(self.patch(i));
        }
        PatchDataset {
            channels: self.channels,
            size: self.size,
            split: self.split,
            sources: idx.iter().map(|&i| self.sources[i].clone()).collect(),
            data,
        }
    }
}

/// A corruption task and its sampling probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskWeight {
    pub operator: OperatorSpec,
    pub probability: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Rollout length.
    pub steps: usize,
    /// Per-step weights for `t = 1..=steps`; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<Vec<f64>>,
    pub tasks: Vec<TaskWeight>,
    /// Noise levels; each example draws one uniformly.
    pub sigmas: Vec<f64>,
    pub batch_size: usize,
    pub updates: usize,
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub quantize: bool,
    /// Validation interval in updates.
    #[serde(default = "default_val_every")]
    pub val_every: usize,
    /// Seed of the fixed validation operators and noise.
    #[serde(default)]
    pub val_seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

fn default_val_every() -> usize {
    250
}

impl TrainConfig {
    /// Denoising at a single noise level with default optimiser settings.
    pub fn denoise(sigma: f64, steps: usize, batch_size: usize, updates: usize, seed: u64) -> Self {
        Self::mixture(vec![OperatorSpec::Identity], sigma, steps, batch_size, updates, seed)
    }

    /// Equal-probability mixture of `operators`.
    pub fn mixture(
        operators: Vec<OperatorSpec>,
        sigma: f64,
        steps: usize,
        batch_size: usize,
        updates: usize,
        seed: u64,
    ) -> Self {
        let p = 1.0 / operators.len() as f64;
        TrainConfig {
            steps,
            loss_weights: None,
            tasks: operators.into_iter().map(|operator| TaskWeight { operator, probability: p }).collect(),
            sigmas: vec![sigma],
            batch_size,
            updates,
            seed,
            learning_rate: default_lr(),
            clip_norm: default_clip(),
            quantize: false,
            val_every: default_val_every(),
            val_seed: 0,
            precision: Precision::F32,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.loss_weights.clone().unwrap_or_else(|| vec![1.0; self.steps])
    }

    // `!(v >= 0.0)` style checks also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.val_every == 0 {
            return Err(invalid("steps, batch_size and val_every must be positive"));
        }
        let w = self.weights();
        if w.len() != self.steps {
            return Err(invalid(format!("{} loss weights for {} steps", w.len(), self.steps)));
        }
        if w.iter().any(|v| !(*v >= 0.0)) || !w.iter().any(|v| *v > 0.0) {
            return Err(invalid("loss weights must be non-negative with at least one positive"));
        }
        if self.tasks.is_empty() {
            return Err(invalid("at least one task is required"));
        }
        let total: f64 = self.tasks.iter().map(|t| t.probability).sum();
        if self.tasks.iter().any(|t| !(t.probability >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("task probabilities must be non-negative and sum to 1, got {total}")));
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(invalid("at least one finite non-negative noise level is required"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(invalid("clip norm must be positive"));
            }
        }
        Ok(())
    }
}

/// `sum_t w_t * mse(x_t, target)` over `t = 1..=T`; the starting point is
/// not penalised.
pub fn total_loss<'t, T: Element>(
    traj: &GraphTrajectory<'t, T>,
    target: Var<'t, T>,
    weights: &[f64],
) -> Result<Var<'t, T>> {
    let preds = &traj.xs[1..];
    if preds.len() != weights.len() {
        return Err(invalid(format!("{} loss weights for {} predictions", weights.len(), preds.len())));
    }
    let mut loss: Option<Var<'t, T>> = None;
    for (x, &w) in preds.iter().zip(weights) {
        let term = x.mse(target)?.scale(w)?;
        loss = Some(match loss {
            Some(l) => l.add(term)?,
            None => term,
        });
    }
    loss.ok_or_else(|| invalid("empty trajectory"))
}

/// Value of [`total_loss`] for a finished rollout.
pub fn total_loss_value<T: Element>(traj: &Trajectory<T>, target: &Tensor<T>, weights: &[f64]) -> Result<f64> {
    let preds = &traj.xs[1..];
    if preds.len() != weights.len() {
        return Err(invalid(format!("{} loss weights for {} predictions", weights.len(), preds.len())));
    }
    let mut total = 0.0;
    for (x, &w) in preds.iter().zip(weights) {
        x.check_same_shape(target, "total_loss")?;
        let se: f64 = x.data().iter().zip(target.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
        total += w * se / x.len() as f64;
    }
    Ok(total)
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step<T: Element>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(invalid(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            p.check_same_shape(g, "adam")?;
            if !g.all_finite() {
                return Err(Error::NonFinite("adam gradient"));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                let update = learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *w = T::of(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Index drawn with the given probabilities.
pub fn sample_task<R: Rng + ?Sized>(probabilities: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Held-out observations with fixed operators and noise.
pub struct ValidationSet<T: Element> {
    pub groups: Vec<ValGroup<T>>,
}

pub struct ValGroup<T: Element> {
    pub task: String,
    pub op: Rc<LinearOperator>,
    pub obs: Observation<T>,
    pub truth: Tensor<T>,
}

/// Largest batch evaluated in one rollout.
const EVAL_CHUNK: usize = 50;

impl<T: Element> ValidationSet<T> {
    /// Patch `i` goes to task `i mod tasks` and noise level `i mod sigmas`.
    /// Task `k` uses one operator seeded from `seed + k`.
    pub fn build(
        data: &PatchDataset,
        tasks: &[OperatorSpec],
        sigmas: &[f64],
        quantize: bool,
        seed: u64,
    ) -> Result<Self> {
        if tasks.is_empty() || sigmas.is_empty() {
            return Err(invalid("validation needs at least one task and noise level"));
        }
        let mut groups = Vec::new();
        for (k, spec) in tasks.iter().enumerate() {
            let spec = spec.with_seed(seed.wrapping_add(k as u64));
            let op = Rc::new(spec.build(data.size, data.size)?);
            let members: Vec<usize> = (k..data.len()).step_by(tasks.len()).collect();
            for (c, chunk) in members.chunks(EVAL_CHUNK).enumerate() {
                let truth = data.batch::<T>(chunk);
                let sig: Vec<f64> = chunk.iter().map(|&i| sigmas[i % sigmas.len()]).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32 | c as u64));
                let obs = observe_with(&op, &truth, &sig, &mut rng, quantize && spec.pixel_domain())?;
                groups.push(ValGroup { task: spec.name().to_string(), op: op.clone(), obs, truth });
            }
        }
        Ok(ValidationSet { groups })
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.truth.batch()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean PSNR over all patches at every step `t = 0..=steps`.
    pub fn psnr_curve(&self, params: &RimParams<T>, steps: usize) -> Result<Vec<f64>> {
        let mut sums = vec![0.0; steps + 1];
        for g in &self.groups {
            let traj = rim_rollout(params, &g.op, &g.obs, steps, None)?;
            for (t, x) in traj.xs.iter().enumerate() {
                sums[t] += per_item_psnr(x, &g.truth)?.iter().sum::<f64>();
            }
        }
        let n = self.len() as f64;
        Ok(sums.into_iter().map(|s| s / n).collect())
    }
}

/// PSNR (peak 1) of every batch item.
pub fn per_item_psnr<T: Element>(x: &Tensor<T>, truth: &Tensor<T>) -> Result<Vec<f64>> {
    x.check_same_shape(truth, "per_item_psnr")?;
    let shape = [x.item_len()];
    (0..x.batch())
        .map(|n| {
            let a = Tensor::new(shape, x.item(n).to_vec())?;
            let b = Tensor::new(shape, truth.item(n).to_vec())?;
            psnr(&a, &b, 1.0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRow {
    pub update: usize,
    pub task: String,
    pub loss: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValRow {
    pub update: usize,
    pub psnr_mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub train: Vec<TrainRow>,
    pub val: Vec<ValRow>,
}

impl TrainLog {
    pub fn train_csv(&self) -> String {
        let mut out = String::from("update_index,task,loss,wall_time\n");
        for r in &self.train {
            let _ = writeln!(out, "{},{},{:.8e},{:.3}", r.update, r.task, r.loss, r.wall_time);
        }
        out
    }

    pub fn val_csv(&self) -> String {
        let mut out = String::from("update_index,psnr_mean\n");
        for r in &self.val {
            let _ = writeln!(out, "{},{}", r.update, fmt(r.psnr_mean));
        }
        out
    }
}

/// Trains from `init` (or a fresh initialisation seeded by `config.seed`).
/// Validation runs before the first update, every `val_every` updates and
/// after the last one.
pub fn train<T: Element>(
    model: &RimConfig,
    config: &TrainConfig,
    data: &PatchDataset,
    val: &PatchDataset,
    init: Option<RimParams<T>>,
) -> Result<(RimParams<T>, TrainLog)> {
    config.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if data.channels != model.channels || val.channels != model.channels {
        return Err(invalid(format!("model expects {} channels, data has {}", model.channels, data.channels)));
    }
    let mut params = match init {
        Some(p) if &p.config == model => p,
        Some(_) => return Err(invalid("initial parameters do not match the model configuration")),
        None => rim_init(model, config.seed)?,
    };
    let specs: Vec<OperatorSpec> = config.tasks.iter().map(|t| t.operator.clone()).collect();
    let probs: Vec<f64> = config.tasks.iter().map(|t| t.probability).collect();
    let val_set = ValidationSet::<T>::build(val, &specs, &config.sigmas, config.quantize, config.val_seed)?;
    let weights = config.weights();
    let mut adam = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();
    let start = Instant::now();

    let validate = |params: &RimParams<T>, update: usize, log: &mut TrainLog| -> Result<()> {
        if val_set.is_empty() {
            return Ok(());
        }
        let curve = val_set.psnr_curve(params, config.steps)?;
        let psnr_mean = *curve.last().expect("non-empty curve");
        log::info!("update {update}: validation psnr {psnr_mean:.3} dB");
        log.val.push(ValRow { update, psnr_mean });
        Ok(())
    };
    validate(&params, 0, &mut log)?;

    let p = data.size;
    for update in 1..=config.updates {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let truth = data.batch::<T>(&idx);
        let k = sample_task(&probs, &mut rng);
        let spec = specs[k].with_seed(rng.random());
        let op = Rc::new(spec.build(p, p)?);
        let sig: Vec<f64> =
            (0..config.batch_size).map(|_| config.sigmas[rng.random_range(0..config.sigmas.len())]).collect();
        let obs = observe_with(&op, &truth, &sig, &mut rng, config.quantize && spec.pixel_domain())?;
        let eta0 = initial_eta(&op, &obs, model.delta)?;

        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Diverged { update, loss: f64::NAN },
            other => other,
        };
        let tape = Tape::new();
        let rim = params.bind(&tape, true);
        let traj = rim
            .rollout(
                &op,
                tape.constant(obs.y.clone()),
                tape.constant(obs.variance()),
                tape.constant(eta0),
                config.steps,
            )
            .map_err(diverged)?;
        let loss = total_loss(&traj, tape.constant(truth), &weights).map_err(diverged)?;
        let loss_value = loss.value().data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { update, loss: loss_value });
        }
        let mut grads = tape.backward(loss).map_err(diverged)?;
        let mut g: Vec<Tensor<T>> =
            rim.weights.entries().into_iter().map(|v| grads.take(*v).expect("leaf gradient")).collect();
        if let Some(c) = config.clip_norm {
            let norm = clip_global_norm(&mut g, c);
            if !norm.is_finite() {
                return Err(Error::Diverged { update, loss: loss_value });
            }
        }
        adam.step(&mut params.weights.entries_mut(), &g).map_err(diverged)?;
        log.train.push(TrainRow {
            update,
            task: spec.name().to_string(),
            loss: loss_value,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if update % config.val_every == 0 || update == config.updates {
            validate(&params, update, &mut log)?;
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests;
