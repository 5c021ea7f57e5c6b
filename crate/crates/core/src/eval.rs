//! Removal quality against the exact ground truth of synthetic scenes.
//!
//! Three numbers per scene and configuration:
//!
//! * `mse_bg`: masked MSE between the result and the true background.
//! * `strength`: masked MSE between the result and the input composite,
//!   i.e. how far the output moved away from the original object.
//! * `drift`: largest absolute change outside the mask.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::datagen::Scene;
use crate::denoiser::Checkpoint;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::Tensor;
use crate::pipelines::{dip_from_trajectory, invert, remove, Codec, Pipeline, RemovalConfig, RunOptions};
use crate::scheduler::Trajectory;

fn mask_plane(a: &Tensor<f32>, b: &Tensor<f32>, mask: &Tensor<f32>) -> Result<usize> {
    a.check_same_shape(b)?;
    let (h, w) = mask.dims2()?;
    let plane = h * w;
    if a.shape().len() < 2 || a.shape()[a.shape().len() - 2..] != [h, w] {
        return Err(Error::dim(format!(
            "mask {:?} does not broadcast over {:?}",
            mask.shape(),
            a.shape()
        )));
    }
    Ok(plane)
}

/// Mean squared difference over the pixels where `mask` is 1, across all
/// channels. The mask is `H×W` and broadcasts over leading channels.
pub fn masked_mse(result: &Tensor<f32>, reference: &Tensor<f32>, mask: &Tensor<f32>) -> Result<f64> {
    let plane = mask_plane(result, reference, mask)?;
    let m = mask.data();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (i, (&a, &b)) in result.data().iter().zip(reference.data()).enumerate() {
        if m[i % plane] > 0.5 {
            let d = f64::from(a) - f64::from(b);
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::DegenerateMask("masked error over an empty mask".into()));
    }
    Ok(sum / count as f64)
}

/// Largest absolute difference over the pixels where `mask` is 0.
pub fn background_drift(result: &Tensor<f32>, input: &Tensor<f32>, mask: &Tensor<f32>) -> Result<f64> {
    let plane = mask_plane(result, input, mask)?;
    let m = mask.data();
    Ok(result
        .data()
        .iter()
        .zip(input.data())
        .enumerate()
        .filter(|(i, _)| m[i % plane] <= 0.5)
        .fold(0.0f64, |acc, (_, (&a, &b))| acc.max((f64::from(a) - f64::from(b)).abs())))
}

/// Scores for one scene under one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneScore {
    pub scene: usize,
    pub mse_bg: f64,
    pub strength: f64,
    pub drift: f64,
}

pub fn score(scene: &Scene, result: &Tensor<f32>) -> Result<SceneScore> {
    Ok(SceneScore {
        scene: scene.index,
        mse_bg: masked_mse(result, &scene.background, &scene.mask)?,
        strength: masked_mse(result, &scene.composite, &scene.mask)?,
        drift: background_drift(result, &scene.composite, &scene.mask)?,
    })
}

/// Mean and sample standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Short human-readable label of a configuration.
pub fn config_label(cfg: &RemovalConfig) -> String {
    format!(
        "{} T={}/{} s={} λ={}",
        cfg.pipeline.name(),
        cfg.steps,
        cfg.ss_cutoff,
        cfg.s,
        cfg.lambda
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigRow {
    pub config: RemovalConfig,
    /// One score per scene, in corpus order.
    pub scores: Vec<SceneScore>,
}

impl ConfigRow {
    fn column(&self, f: impl Fn(&SceneScore) -> f64) -> Vec<f64> {
        self.scores.iter().map(f).collect()
    }

    pub fn mse_bg(&self) -> (f64, f64) {
        mean_sd(&self.column(|s| s.mse_bg))
    }

    pub fn strength(&self) -> (f64, f64) {
        mean_sd(&self.column(|s| s.strength))
    }

    pub fn max_drift(&self) -> f64 {
        self.scores.iter().fold(0.0, |m, s| m.max(s.drift))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemovalReport {
    pub rows: Vec<ConfigRow>,
    pub seconds: f64,
}

const HEADER: &str = "\
# Pixel metrics against exact synthetic ground truth stand in for perceptual
# metrics (which need pretrained feature networks).
# mse_bg: masked MSE of the result vs. the true background (lower is better).
# strength: masked MSE of the result vs. the input composite (distance moved
#   away from the original object).
# drift: max |result - input| outside the mask.
";

impl RemovalReport {
    /// Plain-text table with mean ± sd per configuration.
    pub fn to_table(&self) -> String {
        let mut s = String::from(HEADER);
        let _ = writeln!(
            s,
            "{:<32} {:>5} {:>22} {:>22} {:>10}",
            "config", "n", "mse_bg", "strength", "max_drift"
        );
        for r in &self.rows {
            let (m, sd) = r.mse_bg();
            let (st, ssd) = r.strength();
            let _ = writeln!(
                s,
                "{:<32} {:>5} {:>22} {:>22} {:>10.3e}",
                config_label(&r.config),
                r.scores.len(),
                format!("{m:.5} ± {sd:.5}"),
                format!("{st:.5} ± {ssd:.5}"),
                r.max_drift()
            );
        }
        s
    }

    /// Summary CSV, one line per configuration.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HEADER);
        s.push_str("pipeline,steps,ss_cutoff,s,lambda,seed,n,mse_bg_mean,mse_bg_sd,strength_mean,strength_sd,max_drift\n");
        for r in &self.rows {
            let c = &r.config;
            let (m, sd) = r.mse_bg();
            let (st, ssd) = r.strength();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{m},{sd},{st},{ssd},{}",
                c.pipeline.name(),
                c.steps,
                c.ss_cutoff,
                c.s,
                c.lambda,
                c.seed,
                r.scores.len(),
                r.max_drift()
            );
        }
        s
    }

    /// Per-scene CSV, one line per (configuration, scene).
    pub fn scenes_csv(&self) -> String {
        let mut s = String::from("config,scene,mse_bg,strength,drift\n");
        for (i, r) in self.rows.iter().enumerate() {
            for sc in &r.scores {
                let _ = writeln!(s, "{i},{},{},{},{}", sc.scene, sc.mse_bg, sc.strength, sc.drift);
            }
        }
        s
    }
}

/// Runs every configuration on every scene and scores the results.
///
/// Scenes are processed in parallel under `exec`; SIP noise for a scene is
/// drawn from the stream `(config seed, scene index)`. DIP configurations
/// with equal step counts share one inversion per scene.
pub fn removal_report(
    scenes: &[Scene],
    ck: &Checkpoint,
    configs: &[RemovalConfig],
    exec: Exec,
) -> Result<RemovalReport> {
    if configs.is_empty() {
        return Err(Error::config("no removal configurations given"));
    }
    for c in configs {
        c.validate()?;
    }
    let start = std::time::Instant::now();
    let per_scene = exec.map(scenes, |_, scene| score_scene(scene, ck, configs));
    let mut rows: Vec<ConfigRow> = configs
        .iter()
        .map(|c| ConfigRow {
            config: c.clone(),
            scores: Vec::with_capacity(scenes.len()),
        })
        .collect();
    for scores in per_scene {
        for (row, s) in rows.iter_mut().zip(scores?) {
            row.scores.push(s);
        }
    }
    Ok(RemovalReport {
        rows,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn score_scene(scene: &Scene, ck: &Checkpoint, configs: &[RemovalConfig]) -> Result<Vec<SceneScore>> {
    let mask = ck.denoiser.removal_mask(scene.mask.clone())?;
    let opts = RunOptions {
        exec: Exec::Sequential,
        stream: scene.index as u64,
        ..RunOptions::default()
    };
    let mut inversions: BTreeMap<(usize, usize), Trajectory<f32>> = BTreeMap::new();
    configs
        .iter()
        .map(|cfg| {
            let result = match cfg.pipeline {
                Pipeline::Sip => remove(ck, &scene.composite, &mask, cfg, &opts)?.0,
                Pipeline::Dip => {
                    let key = (cfg.steps, cfg.inversion_refine);
                    if let std::collections::btree_map::Entry::Vacant(e) = inversions.entry(key) {
                        let sched = ck.schedule(cfg.steps)?;
                        let x0 = Codec::Identity.encode(&scene.composite);
                        e.insert(invert(&ck.denoiser, &sched, &x0, cfg.inversion_refine)?);
                    }
                    dip_from_trajectory(ck, &inversions[&key], &mask, cfg, &opts)?.0
                }
            };
            score(scene, &result)
        })
        .collect()
}

/// Paired t-test on `a[i] − b[i]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedT {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// One-sided p-value for the alternative `mean(a − b) > 0`.
    pub p_greater: f64,
    /// One-sided p-value for the alternative `mean(a − b) < 0`.
    pub p_less: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedT> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::config("paired test needs two equal-length samples of size ≥ 2"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let (mean, sd) = mean_sd(&d);
    let t = if sd > 0.0 {
        mean / (sd / (n as f64).sqrt())
    } else if mean == 0.0 {
        0.0
    } else {
        mean.signum() * f64::INFINITY
    };
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::config(e.to_string()))?;
    let p_less = if t.is_infinite() {
        if t < 0.0 {
            0.0
        } else {
            1.0
        }
    } else {
        dist.cdf(t)
    };
    Ok(PairedT {
        n,
        mean_diff: mean,
        t,
        p_greater: 1.0 - p_less,
        p_less,
    })
}
