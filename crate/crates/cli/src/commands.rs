//! `train`, `eval`, `reconstruct` and `synth`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rim_core::likelihood::{observe, Observation};
use rim_core::metrics::{fmt, psnr, ssim, MetricReport, SSIM_WINDOW};
use rim_core::models::{rim_rollout, RimParams, Trajectory};
use rim_core::operators::OperatorSpec;
use rim_core::synthetic::dead_leaves;
use rim_core::training::{extract_patches, train, Precision, Split, TrainLog};
use rim_core::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::images::{load_image, load_images, save_image, Image};
use crate::task::Task;

pub const CHECKPOINT_FILE: &str = "checkpoint.rim";

/// Trains as configured by the file at `config_path` and writes
/// `checkpoint.rim`, `train.csv`, `val.csv` and `config.json` to the output
/// directory.
///
/// Training always runs on one thread, so `deterministic` changes nothing
/// here; it is accepted for symmetry with `eval`.
pub fn cmd_train(config_path: &Path, _deterministic: bool) -> CliResult<(Checkpoint, TrainLog)> {
    let cfg = ExperimentConfig::load(config_path)?;
    let images = load_images(&cfg.data.images)?;
    if cfg.data.holdout >= images.len() {
        return Err(CliError::data(
            &cfg.data.images,
            format!("{} images cannot spare {} for validation", images.len(), cfg.data.holdout),
        ));
    }
    let pairs: Vec<(String, Tensor<f32>)> = images.into_iter().map(|i| (i.name, i.data)).collect();
    let (train_imgs, val_imgs) = pairs.split_at(pairs.len() - cfg.data.holdout);
    let d = &cfg.data;
    let train_set = extract_patches(train_imgs, d.patch_size, d.stride(), Split::Train)?;
    let val_set = if val_imgs.is_empty() {
        // an empty validation set; extract_patches refuses empty input
        extract_patches(train_imgs, d.patch_size, d.stride(), Split::Val)?.spread(0)
    } else {
        extract_patches(val_imgs, d.patch_size, d.stride(), Split::Val)?.spread(d.val_patches)
    };
    log::info!("{} training patches, {} validation patches", train_set.len(), val_set.len());

    let (params, log) = match cfg.train.precision {
        Precision::F32 => train::<f32>(&cfg.model, &cfg.train, &train_set, &val_set, None)?,
        Precision::F64 => {
            let (p, l) = train::<f64>(&cfg.model, &cfg.train, &train_set, &val_set, None)?;
            (p.cast::<f32>(), l)
        }
    };
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let ck = Checkpoint { params, step: cfg.train.updates, rollout_steps: cfg.train.steps };
    ck.save(&out.join(CHECKPOINT_FILE))?;
    write(&out.join("train.csv"), &log.train_csv())?;
    write(&out.join("val.csv"), &log.val_csv())?;
    write(&out.join("config.json"), &cfg.to_json())?;
    Ok((ck, log))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Worker threads for evaluation: 1 when deterministic, else `RIM_THREADS`
/// or the available parallelism.
pub fn worker_threads(deterministic: bool) -> usize {
    if deterministic {
        return 1;
    }
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("RIM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => available,
    }
}

/// Noise seed of the `index`-th evaluated image.
fn noise_seed(task: &Task, index: usize) -> u64 {
    let base = match task.operator {
        OperatorSpec::Mask { seed, .. }
        | OperatorSpec::Gaussian { seed, .. }
        | OperatorSpec::Bernoulli { seed, .. }
        | OperatorSpec::Fourier { seed, .. } => seed,
        _ => 0,
    };
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

/// Why `task` cannot run on an image of this size, if it cannot.
fn unsupported(task: &Task, h: usize, w: usize) -> Option<String> {
    match task.operator {
        OperatorSpec::Bicubic { factor } if !h.is_multiple_of(factor) || !w.is_multiple_of(factor) => {
            Some(format!("{h}x{w} is not divisible by {factor}"))
        }
        _ => None,
    }
}

/// Corrupts `image` with `task` and runs the model for `steps` steps.
pub fn corrupt_and_reconstruct(
    params: &RimParams<f32>,
    task: &Task,
    image: &Tensor<f32>,
    steps: usize,
    noise_seed: u64,
) -> CliResult<(Observation<f32>, Trajectory<f32>)> {
    let s = image.shape();
    let op = Rc::new(task.operator.build(s[1], s[2])?);
    let x = image.clone().reshape([1, s[0], s[1], s[2]])?;
    let obs = observe(&op, &x, task.sigma, noise_seed, task.quantize)?;
    let traj = rim_rollout(params, &op, &obs, steps, None)?;
    Ok((obs, traj))
}

struct Scored {
    name: String,
    curve: Vec<f64>,
    ssim: Option<f64>,
}

fn score(params: &RimParams<f32>, task: &Task, image: &Image, index: usize, steps: usize) -> CliResult<Scored> {
    let (_, traj) = corrupt_and_reconstruct(params, task, &image.data, steps, noise_seed(task, index))?;
    let truth = image.data.clone().reshape([1].iter().chain(image.data.shape()).copied().collect::<Vec<_>>())?;
    let curve = traj.xs.iter().map(|x| psnr(x, &truth, 1.0)).collect::<Result<Vec<_>, _>>()?;
    let (h, w) = (image.data.shape()[1], image.data.shape()[2]);
    let ssim = if h >= SSIM_WINDOW && w >= SSIM_WINDOW { Some(ssim(traj.last(), &truth)?) } else { None };
    Ok(Scored { name: image.name.clone(), curve, ssim })
}

/// Outcome of [`cmd_eval`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub report: MetricReport,
    /// Mean PSNR of `x_t` for `t = 0..=steps`.
    pub curve: Vec<f64>,
    pub skipped: Vec<String>,
}

impl EvalResult {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("t,psnr_mean\n");
        for (t, v) in self.curve.iter().enumerate() {
            let _ = writeln!(out, "{t},{}", fmt(*v));
        }
        out
    }
}

/// Scores every image in `images` after `steps` model steps. Images are
/// processed in parallel when `threads > 1`; results do not depend on the
/// thread count.
pub fn evaluate(
    params: &RimParams<f32>,
    task: &Task,
    images: &[Image],
    steps: usize,
    threads: usize,
) -> CliResult<EvalResult> {
    if steps == 0 {
        return Err(CliError::Usage("steps must be at least 1".into()));
    }
    let mut skipped = Vec::new();
    let mut work = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let s = img.data.shape();
        if s[0] != params.config.channels {
            return Err(CliError::Usage(format!(
                "{} has {} channels, the model expects {}",
                img.name, s[0], params.config.channels
            )));
        }
        match unsupported(task, s[1], s[2]) {
            Some(why) => {
                log::warn!("skipping {}: {why}", img.name);
                skipped.push(img.name.clone());
            }
            None => work.push((i, img)),
        }
    }
    let threads = threads.clamp(1, work.len().max(1));
    let results: Vec<CliResult<Scored>> = if threads == 1 {
        work.iter().map(|&(i, img)| score(params, task, img, i, steps)).collect()
    } else {
        let chunk = work.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = work
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter().map(|&(i, img)| score(params, task, img, i, steps)).collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut report = MetricReport::default();
    let mut sums = vec![0.0; steps + 1];
    for r in results {
        let s = r?;
        for (acc, v) in sums.iter_mut().zip(&s.curve) {
            *acc += v;
        }
        report.push(s.name, *s.curve.last().expect("curve"), s.ssim);
    }
    let n = report.rows.len();
    if n == 0 {
        return Err(CliError::Usage("no image could be evaluated with this task".into()));
    }
    let curve = sums.into_iter().map(|s| s / n as f64).collect();
    Ok(EvalResult { report, curve, skipped })
}

/// Writes `metrics.csv` and `curve.csv` for `task` on every image in
/// `image_dir`. `steps` defaults to the training rollout length.
pub fn cmd_eval(
    checkpoint: &Path,
    task: &Task,
    image_dir: &Path,
    steps: Option<usize>,
    out: &Path,
    deterministic: bool,
) -> CliResult<EvalResult> {
    let ck = Checkpoint::load(checkpoint)?;
    let images = load_images(image_dir)?;
    let steps = steps.unwrap_or(ck.rollout_steps);
    let result = evaluate(&ck.params, task, &images, steps, worker_threads(deterministic))?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write(&out.join("metrics.csv"), &result.report.to_csv(0))?;
    write(&out.join("curve.csv"), &result.curve_csv())?;
    log::info!(
        "{task}: mean psnr {:.3} dB over {} images ({} skipped)",
        result.report.mean_psnr(),
        result.report.rows.len(),
        result.skipped.len()
    );
    Ok(result)
}

/// Options of [`cmd_reconstruct`].
#[derive(Clone, Debug)]
pub struct ReconstructOptions {
    /// Corruption applied to the clean input. With `observed`, the input is
    /// already corrupted and the task only names the operator.
    pub task: Task,
    pub observed: bool,
    /// Defaults to the training rollout length.
    pub steps: Option<usize>,
    /// Also write every `k`-th iterate, starting at `t = 0`.
    pub filmstrip: Option<usize>,
    pub seed: u64,
}

/// Reconstructs `input` and writes `<name>_rim.<ext>` (and filmstrip frames
/// `<name>_t<t>.<ext>`) to `out`, keeping the input's file format. Returns
/// the written paths.
pub fn cmd_reconstruct(
    checkpoint: &Path,
    input: &Path,
    opts: &ReconstructOptions,
    out: &Path,
) -> CliResult<Vec<PathBuf>> {
    let ck = Checkpoint::load(checkpoint)?;
    let image = load_image(input)?;
    let steps = opts.steps.unwrap_or(ck.rollout_steps);
    if steps == 0 {
        return Err(CliError::Usage("steps must be at least 1".into()));
    }
    if opts.filmstrip == Some(0) {
        return Err(CliError::Usage("filmstrip stride must be positive".into()));
    }
    let s = image.data.shape().to_vec();
    if s[0] != ck.params.config.channels {
        return Err(CliError::Usage(format!(
            "input has {} channels, the model expects {}",
            s[0], ck.params.config.channels
        )));
    }
    let traj = if opts.observed {
        let (h, w) = match opts.task.operator {
            OperatorSpec::Identity => (s[1], s[2]),
            OperatorSpec::Bicubic { factor } => (s[1] * factor, s[2] * factor),
            _ => {
                return Err(CliError::Usage(format!(
                    "{} measurements are not images; pass the clean input instead",
                    opts.task.label()
                )))
            }
        };
        let op = Rc::new(opts.task.operator.build(h, w)?);
        let y = image.data.clone().reshape([1, s[0], s[1] * s[2]])?;
        let obs =
            Observation { y, sigma: vec![opts.task.sigma], quantized: false, operator: opts.task.operator.clone() };
        rim_rollout(&ck.params, &op, &obs, steps, None)?
    } else {
        if let Some(why) = unsupported(&opts.task, s[1], s[2]) {
            return Err(CliError::Usage(format!("{}: {why}", input.display())));
        }
        corrupt_and_reconstruct(&ck.params, &opts.task, &image.data, steps, opts.seed)?.1
    };
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let ext = image.format.extension();
    let frame = |x: &Tensor<f32>| -> CliResult<Tensor<f32>> {
        let shape = x.shape()[1..].to_vec();
        Ok(x.clone().reshape(shape)?)
    };
    let mut written = Vec::new();
    let path = out.join(format!("{}_rim.{ext}", image.name));
    save_image(&path, &frame(traj.last())?)?;
    written.push(path);
    if let Some(k) = opts.filmstrip {
        let width = steps.to_string().len();
        for t in (0..=steps).step_by(k) {
            let path = out.join(format!("{}_t{t:0width$}.{ext}", image.name));
            save_image(&path, &frame(&traj.xs[t])?)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Writes `count` dead-leaves images named `leaves_<k>.pgm` (or `.ppm` for
/// colour) to `out`.
pub fn cmd_synth(out: &Path, count: usize, size: usize, channels: usize, seed: u64) -> CliResult<Vec<PathBuf>> {
    if count == 0 || size == 0 || !(channels == 1 || channels == 3) {
        return Err(CliError::Usage("synth needs count > 0, size > 0 and 1 or 3 channels".into()));
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    let width = (count - 1).to_string().len();
    (0..count)
        .map(|k| {
            let path = out.join(format!("leaves_{k:0width$}.{ext}"));
            save_image(&path, &dead_leaves(channels, size, size, seed + k as u64))?;
            Ok(path)
        })
        .collect()
}
