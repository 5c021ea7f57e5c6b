use super::unet::Ctx;
use super::{Denoiser, DenoiserConfig, Params};
use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::{Rng, Tensor};
use crate::scheduler::NoiseSchedule;

/// Optimizer and loop settings.
///
/// The optimizer is RMSprop without momentum: a bias-corrected running
/// mean of squared gradients scales each coordinate's step.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decay of the squared-gradient average.
    pub rho: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Cosine-anneal the learning rate down to `lr·ratio` over the run.
    pub cosine_to: Option<f64>,
    pub log_every: usize,
    pub exec: Exec,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            rho: 0.99,
            eps: 1e-8,
            grad_clip: 1.0,
            max_steps: None,
            cosine_to: None,
            log_every: 50,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss at every optimizer step.
    pub losses: Vec<f64>,
    pub steps: usize,
}

struct Sample {
    index: usize,
    t: usize,
    eps: Tensor<f32>,
}

/// Trains a freshly initialized network (initialized from `rng`).
pub fn train(
    config: DenoiserConfig,
    dataset: &[Tensor<f32>],
    sched: &NoiseSchedule,
    rng: &mut Rng,
    opts: &TrainOptions,
) -> Result<(Denoiser, TrainReport)> {
    let mut model = Denoiser::new(config, rng)?;
    let report = fit(&mut model, dataset, sched, rng, opts)?;
    Ok((model, report))
}

/// Continues training `model` in place on the ε-prediction MSE.
///
/// All randomness is drawn from `rng` on the calling thread before any
/// parallel work, and per-sample gradients are summed in batch order, so
/// the result is identical under every [`Exec`] policy.
pub fn fit(
    model: &mut Denoiser,
    dataset: &[Tensor<f32>],
    sched: &NoiseSchedule,
    rng: &mut Rng,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if opts.batch_size == 0 || opts.lr <= 0.0 || !(0.0..1.0).contains(&opts.rho) {
        return Err(Error::config("batch size and learning rate must be positive, rho in [0, 1)"));
    }
    for x in dataset {
        model.check_input(x)?;
    }
    let t_max = sched.train_steps();
    let mut second = vec![0.0f64; model.weights.len()];
    let mut report = TrainReport::default();
    let mut step = 0usize;
    let per_epoch = dataset.len().div_ceil(opts.batch_size);
    let total = opts.max_steps.map_or(opts.epochs * per_epoch, |m| m.min(opts.epochs * per_epoch));
    let lr_at = |step: usize| match opts.cosine_to {
        Some(ratio) if total > 1 => {
            let p = (step - 1) as f64 / (total - 1) as f64;
            opts.lr * (ratio + (1.0 - ratio) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
        }
        _ => opts.lr,
    };
    'epochs: for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        for chunk in order.chunks(opts.batch_size) {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let samples: Vec<Sample> = chunk
                .iter()
                .map(|&index| Sample {
                    index,
                    t: 1 + rng.below(t_max),
                    eps: rng.normal_tensor(dataset[index].shape()),
                })
                .collect();
            let results = opts.exec.map(&samples, |_, s| sample_grad(model, sched, &dataset[s.index], s));
            let mut grad = model.weights.zeros_like().cast::<f64>();
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                for (acc, v) in grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += f64::from(*v);
                }
            }
            let b = samples.len() as f64;
            loss /= b;
            step += 1;
            if !loss.is_finite() {
                return Err(diverged(step, loss, model));
            }
            let mut norm = 0.0;
            for g in grad.data_mut() {
                *g /= b;
                norm += *g * *g;
            }
            let norm = norm.sqrt();
            let clip = if opts.grad_clip > 0.0 && norm > opts.grad_clip {
                opts.grad_clip / norm
            } else {
                1.0
            };
            let last_good = model.weights.clone();
            let correction = 1.0 - opts.rho.powi(step as i32);
            let lr = lr_at(step);
            for ((w, &g), v) in model
                .weights
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(second.iter_mut())
            {
                let g = g * clip;
                *v = opts.rho * *v + (1.0 - opts.rho) * g * g;
                let denom = (*v / correction).sqrt() + opts.eps;
                *w = (f64::from(*w) - lr * g / denom) as f32;
            }
            if !model.weights.is_finite() {
                model.weights = last_good;
                return Err(diverged(step, f64::NAN, model));
            }
            report.losses.push(loss);
            if opts.log_every > 0 && step.is_multiple_of(opts.log_every) {
                log::info!("epoch {epoch} step {step} loss {loss:.5}");
            }
        }
    }
    report.steps = step;
    Ok(report)
}

fn diverged(step: usize, loss: f64, model: &Denoiser) -> Error {
    Error::Diverged {
        step,
        loss,
        last_good: Box::new(model.weights.clone()),
    }
}

fn sample_grad(
    model: &Denoiser,
    sched: &NoiseSchedule,
    x0: &Tensor<f32>,
    s: &Sample,
) -> Result<(f64, Params<f32>)> {
    let xt = sched.add_noise(x0, s.t, &s.eps)?;
    let ctx = Ctx {
        t: s.t,
        mode: AttentionMode::Standard,
        mask: None,
        record: false,
    };
    let (y, tape, _) = model.net.forward(&model.weights, xt.data(), &ctx)?;
    let n = y.len() as f64;
    let mut loss = 0.0;
    let dy: Vec<f32> = y
        .iter()
        .zip(s.eps.data())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            loss += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    Ok((loss / n, model.net.backward(&model.weights, &tape, &dy)))
}
