//! Linear variance schedule, forward noising, deterministic DDIM steps and
//! DDIM inversion.
//!
//! Timesteps are 1-based (`1..=T`); `alpha_bar(0)` is defined as exactly 1
//! so the last reverse step lands on the clean sample.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Fixed-point refinements per inversion step used by the pipelines.
pub const DEFAULT_INVERSION_REFINE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    inference_steps: Vec<usize>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `train_steps`
    /// steps, with `inference_steps` evenly spaced timesteps for sampling.
    pub fn new(train_steps: usize, beta_start: f64, beta_end: f64, inference_steps: usize) -> Result<Self> {
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        if train_steps == 0 {
            return Err(Error::config("train_steps must be at least 1"));
        }
        let beta: Vec<f64> = (0..train_steps)
            .map(|i| {
                if train_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(train_steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let mut sched = Self {
            train_steps,
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
            inference_steps: Vec::new(),
        };
        sched.inference_steps = sched.spaced_steps(inference_steps)?;
        Ok(sched)
    }

    pub fn default_with_steps(inference_steps: usize) -> Result<Self> {
        Self::new(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END, inference_steps)
    }

    fn spaced_steps(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.train_steps {
            return Err(Error::config(format!(
                "inference steps must be in 1..={}, got {n}",
                self.train_steps
            )));
        }
        Ok((1..=n).rev().map(|i| i * self.train_steps / n).collect())
    }

    /// Same training schedule with a different number of sampling steps.
    pub fn with_inference_steps(&self, n: usize) -> Result<Self> {
        let mut s = self.clone();
        s.inference_steps = self.spaced_steps(n)?;
        Ok(s)
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Cumulative products; index `t-1` holds ᾱ_t.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Sampling timesteps, strictly decreasing.
    pub fn inference_steps(&self) -> &[usize] {
        &self.inference_steps
    }

    /// `(t, t_prev)` pairs visited by the reverse process; the last pair
    /// ends at 0.
    pub fn step_pairs(&self) -> Vec<(usize, usize)> {
        self.inference_steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.inference_steps.get(i + 1).copied().unwrap_or(0)))
            .collect()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.train_steps => Ok(self.alpha_bar[t - 1]),
            t => Err(Error::Timestep(format!(
                "t = {t} outside 0..={}",
                self.train_steps
            ))),
        }
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
    pub fn add_noise<R: Real>(&self, x0: &Tensor<R>, t: usize, eps: &Tensor<R>) -> Result<Tensor<R>> {
        x0.check_same_shape(eps)?;
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        combine(x0, a, eps, b)
    }

    /// Deterministic (η = 0) DDIM update from `t` to `t_prev`:
    /// `√ᾱ_prev·(z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t + √(1−ᾱ_prev)·ε̂`.
    pub fn ddim_step<R: Real>(
        &self,
        z_t: &Tensor<R>,
        eps_hat: &Tensor<R>,
        t: usize,
        t_prev: usize,
    ) -> Result<Tensor<R>> {
        if t <= t_prev {
            return Err(Error::Timestep(format!(
                "ddim step needs t > t_prev, got {t} -> {t_prev}"
            )));
        }
        z_t.check_same_shape(eps_hat)?;
        ddim_transfer(self.alpha_bar(t)?, self.alpha_bar(t_prev)?, z_t, eps_hat)
    }

    /// DDIM inversion: runs the same recurrence upward (`t_prev → t`) over
    /// the inference timesteps.
    ///
    /// Each step starts from `eps_fn(x_{t_prev}, t)` and then applies
    /// `refine` fixed-point iterations `x_t ← transfer(x_{t_prev}, eps_fn(x_t, t))`.
    /// A converged iterate is exactly the latent that one reverse
    /// [`ddim_step`](Self::ddim_step) maps back onto `x_{t_prev}`.
    pub fn ddim_invert<R, F>(&self, x0: &Tensor<R>, refine: usize, mut eps_fn: F) -> Result<Trajectory<R>>
    where
        R: Real,
        F: FnMut(&Tensor<R>, usize) -> Result<Tensor<R>>,
    {
        let mut ascending: Vec<usize> = self.inference_steps.clone();
        ascending.reverse();
        let mut latents = Vec::with_capacity(ascending.len());
        let mut prev_t = 0;
        let mut prev = x0.clone();
        for &t in &ascending {
            let (ab_from, ab_to) = (self.alpha_bar(prev_t)?, self.alpha_bar(t)?);
            let eps = eps_fn(&prev, t)?;
            prev.check_same_shape(&eps)?;
            let mut current = ddim_transfer(ab_from, ab_to, &prev, &eps)?;
            for _ in 0..refine {
                let eps = eps_fn(&current, t)?;
                current.check_same_shape(&eps)?;
                current = ddim_transfer(ab_from, ab_to, &prev, &eps)?;
            }
            latents.push(current.clone());
            prev = current;
            prev_t = t;
        }
        Ok(Trajectory {
            x0: x0.clone(),
            steps: ascending,
            latents,
        })
    }

    /// Plain DDIM sampling from `z` at the first inference step down to 0.
    pub fn ddim_sample<R, F>(&self, z: &Tensor<R>, mut eps_fn: F) -> Result<Tensor<R>>
    where
        R: Real,
        F: FnMut(&Tensor<R>, usize) -> Result<Tensor<R>>,
    {
        let mut current = z.clone();
        for (t, t_prev) in self.step_pairs() {
            let eps = eps_fn(&current, t)?;
            current = self.ddim_step(&current, &eps, t, t_prev)?;
        }
        Ok(current)
    }
}

/// Latents produced by DDIM inversion, in increasing timestep order.
#[derive(Debug, Clone)]
pub struct Trajectory<R: Real = f32> {
    pub x0: Tensor<R>,
    pub steps: Vec<usize>,
    pub latents: Vec<Tensor<R>>,
}

impl<R: Real> Trajectory<R> {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// Latent at timestep `t` (`x0` for `t = 0`).
    pub fn at(&self, t: usize) -> Option<&Tensor<R>> {
        if t == 0 {
            return Some(&self.x0);
        }
        self.steps
            .iter()
            .position(|&s| s == t)
            .map(|i| &self.latents[i])
    }

    /// The most-noised latent, the starting point of reverse sampling.
    pub fn last(&self) -> Option<&Tensor<R>> {
        self.latents.last()
    }
}

fn combine<R: Real>(x: &Tensor<R>, a: f64, y: &Tensor<R>, b: f64) -> Result<Tensor<R>> {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&x, &y)| R::lit(a * x.as_f64() + b * y.as_f64()))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Moves a latent between noise levels along the deterministic DDIM path.
fn ddim_transfer<R: Real>(ab_from: f64, ab_to: f64, z: &Tensor<R>, eps: &Tensor<R>) -> Result<Tensor<R>> {
    let sa_from = ab_from.sqrt();
    let sb_from = (1.0 - ab_from).sqrt();
    let sa_to = ab_to.sqrt();
    let sb_to = (1.0 - ab_to).sqrt();
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| {
            let (z, e) = (z.as_f64(), e.as_f64());
            let x0 = (z - sb_from * e) / sa_from;
            R::lit(sa_to * x0 + sb_to * e)
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}
