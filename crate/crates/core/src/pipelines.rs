//! Object-removal pipelines.
//!
//! Both pipelines walk the inference timesteps from `T_I` down to 1. At
//! every step they take a guided noise prediction, apply a DDIM update, and
//! paste the original image (noised to the new timestep) back outside the
//! mask:
//!
//! * **SIP** starts from the image noised with a seeded Gaussian and
//!   re-noises the original with fresh seeded noise at every step.
//! * **DIP** starts from the DDIM inversion of the image and pastes back
//!   the inversion latents, so it uses no randomness at all.
//!
//! Because `ᾱ_0 = 1`, the last paste writes the original pixels exactly, so
//! the background outside the mask is preserved bit-for-bit.

use std::time::Instant;

use crate::attention::{flatten_mask, AttentionMode, AttentionRecord, RemovalMask};
use crate::denoiser::{Checkpoint, Denoiser};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::guidance::{guided_predict_recorded, GuidanceParams};
use crate::numerics::{Archive, Rng, Tensor};
use crate::scheduler::{NoiseSchedule, Trajectory, DEFAULT_INVERSION_REFINE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    Sip,
    Dip,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Sip => "sip",
            Pipeline::Dip => "dip",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sip" => Ok(Pipeline::Sip),
            "dip" => Ok(Pipeline::Dip),
            other => Err(Error::config(format!("unknown pipeline `{other}` (sip|dip)"))),
        }
    }
}

/// Removal settings. Defaults:
/// SIP 40/30/9/0.3 and DIP 50/40/9/0.3 for `(T_I, T_SS, s, λ)`, seed 123.
#[derive(Debug, Clone, PartialEq)]
pub struct RemovalConfig {
    pub pipeline: Pipeline,
    /// Number of inference steps `T_I`.
    pub steps: usize,
    /// Similarity suppression runs while the step counter `k` (counting
    /// down from `T_I` to 1) satisfies `k ≥ T_SS`.
    pub ss_cutoff: usize,
    pub s: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Fixed-point refinements per DDIM inversion step (DIP only).
    pub inversion_refine: usize,
}

impl RemovalConfig {
    pub fn defaults(pipeline: Pipeline) -> Self {
        let (steps, ss_cutoff) = match pipeline {
            Pipeline::Sip => (40, 30),
            Pipeline::Dip => (50, 40),
        };
        Self {
            pipeline,
            steps,
            ss_cutoff,
            s: 9.0,
            lambda: 0.3,
            seed: 123,
            inversion_refine: DEFAULT_INVERSION_REFINE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be ≥ 1"));
        }
        if self.ss_cutoff == 0 || self.ss_cutoff > self.steps {
            return Err(Error::config(format!(
                "ss cutoff must be in 1..={}, got {}",
                self.steps, self.ss_cutoff
            )));
        }
        if !self.s.is_finite() || self.s < 0.0 {
            return Err(Error::config(format!("s must be ≥ 0, got {}", self.s)));
        }
        AttentionMode::AasSs { lambda: self.lambda }.validate()
    }

    /// Whether step `k` (`T_I` first, 1 last) lies in the closed window
    /// `[T_SS, T_I]`.
    pub fn in_ss_window(&self, k: usize) -> bool {
        k >= self.ss_cutoff && k <= self.steps
    }

    pub fn guidance(&self, k: usize) -> Result<GuidanceParams> {
        let mode = if self.in_ss_window(k) {
            AttentionMode::AasSs { lambda: self.lambda }
        } else {
            AttentionMode::Aas
        };
        GuidanceParams::new(self.s, mode)
    }

    pub fn to_entries(&self) -> Vec<(String, String)> {
        vec![
            ("pipeline".into(), self.pipeline.name().into()),
            ("steps".into(), self.steps.to_string()),
            ("ss_cutoff".into(), self.ss_cutoff.to_string()),
            ("s".into(), self.s.to_string()),
            ("lambda".into(), self.lambda.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("inversion_refine".into(), self.inversion_refine.to_string()),
        ]
    }
}

/// Encode/decode boundary between pixels and the diffusion space.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Codec {
    /// Diffusion runs directly on pixels.
    #[default]
    Identity,
}

impl Codec {
    pub fn encode(&self, x: &Tensor<f32>) -> Tensor<f32> {
        match self {
            Codec::Identity => x.clone(),
        }
    }

    pub fn decode(&self, z: &Tensor<f32>) -> Tensor<f32> {
        match self {
            Codec::Identity => z.clone(),
        }
    }

    /// Side of the latent grid for an image of side `side`.
    pub fn latent_side(&self, side: usize) -> usize {
        side
    }
}

/// `z ⊙ M + x ⊙ (1 − M)` for a binary mask; the mask may be a single
/// `H×W` plane broadcast over the leading channel axis.
pub fn blend_latents(z: &Tensor<f32>, x_noised: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    z.check_same_shape(x_noised)?;
    let plane = mask.len();
    if plane == 0 || !z.len().is_multiple_of(plane) || mask.shape() != &z.shape()[z.rank() - mask.rank()..] {
        return Err(Error::dim(format!(
            "mask {:?} does not broadcast over latent {:?}",
            mask.shape(),
            z.shape()
        )));
    }
    let m = mask.data();
    let data = z
        .data()
        .iter()
        .zip(x_noised.data())
        .enumerate()
        .map(|(i, (&a, &b))| if m[i % plane] > 0.5 { a } else { b })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[derive(Default)]
pub struct RunOptions {
    pub exec: Exec,
    /// Keep every attention record of every step in the trace.
    pub record_attention: bool,
    /// Keep the latent after every step in the trace.
    pub keep_latents: bool,
    /// SIP noise comes from `Rng::derive(seed, stream)`; batch runs use
    /// the item index here.
    pub stream: u64,
}


/// What a pipeline run leaves behind besides the result.
#[derive(Debug, Clone, Default)]
pub struct RemovalTrace {
    /// Timestep of each inference step, in execution order.
    pub timesteps: Vec<usize>,
    pub records: Vec<AttentionRecord>,
    /// `(t_prev, latent after the blend)` per step when requested.
    pub latents: Vec<(usize, Tensor<f32>)>,
    pub seconds: f64,
}

impl RemovalTrace {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.set_meta("format", "removal-trace");
        a.set_meta(
            "timesteps",
            self.timesteps.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        for r in &self.records {
            r.push_into(&mut a);
        }
        for (t, z) in &self.latents {
            a.push(format!("latent/{t}"), z.clone());
        }
        a
    }
}

fn check_inputs(model: &Denoiser, image: &Tensor<f32>, mask: &RemovalMask) -> Result<()> {
    let c = model.config();
    if image.shape() != [c.channels, c.image_size, c.image_size] {
        return Err(Error::dim(format!(
            "image has shape {:?}, checkpoint expects [{}, {2}, {2}]",
            image.shape(),
            c.channels,
            c.image_size
        )));
    }
    let (h, w) = mask.base().dims2()?;
    if (h, w) != (c.image_size, c.image_size) {
        return Err(Error::dim(format!("mask is {h}×{w}, image is {0}×{0}", c.image_size)));
    }
    for r in c.mask_resolutions() {
        mask.flat(r)?;
    }
    Ok(())
}

/// Latent-resolution blend mask (any-coverage downsampling of the base).
pub fn latent_mask(mask: &RemovalMask, codec: Codec) -> Result<Tensor<f32>> {
    let (h, _) = mask.base().dims2()?;
    let n = codec.latent_side(h);
    flatten_mask(mask.base(), n)?.reshape(vec![n, n])
}

/// Runs the pipeline selected by `cfg.pipeline`.
pub fn remove(
    ck: &Checkpoint,
    image: &Tensor<f32>,
    mask: &RemovalMask,
    cfg: &RemovalConfig,
    opts: &RunOptions,
) -> Result<(Tensor<f32>, RemovalTrace)> {
    match cfg.pipeline {
        Pipeline::Sip => sip_remove(ck, image, mask, cfg, opts),
        Pipeline::Dip => dip_remove(ck, image, mask, cfg, opts),
    }
}

/// Stochastic inpainting pipeline.
pub fn sip_remove(
    ck: &Checkpoint,
    image: &Tensor<f32>,
    mask: &RemovalMask,
    cfg: &RemovalConfig,
    opts: &RunOptions,
) -> Result<(Tensor<f32>, RemovalTrace)> {
    if cfg.pipeline != Pipeline::Sip {
        return Err(Error::config("sip_remove needs pipeline = sip"));
    }
    cfg.validate()?;
    let model = &ck.denoiser;
    check_inputs(model, image, mask)?;
    let sched = ck.schedule(cfg.steps)?;
    let codec = Codec::Identity;
    let x0 = codec.encode(image);
    let mut rng = Rng::derive(cfg.seed, opts.stream);
    let eps = rng.normal_tensor::<f32>(x0.shape());
    let z = sched.add_noise(&x0, sched.inference_steps()[0], &eps)?;
    guided_loop(model, &sched, codec, z, mask, cfg, opts, |t_prev| {
        let fresh = rng.normal_tensor::<f32>(x0.shape());
        sched.add_noise(&x0, t_prev, &fresh)
    })
}

/// Deterministic inpainting pipeline.
pub fn dip_remove(
    ck: &Checkpoint,
    image: &Tensor<f32>,
    mask: &RemovalMask,
    cfg: &RemovalConfig,
    opts: &RunOptions,
) -> Result<(Tensor<f32>, RemovalTrace)> {
    if cfg.pipeline != Pipeline::Dip {
        return Err(Error::config("dip_remove needs pipeline = dip"));
    }
    cfg.validate()?;
    check_inputs(&ck.denoiser, image, mask)?;
    let sched = ck.schedule(cfg.steps)?;
    let traj = invert(&ck.denoiser, &sched, &Codec::Identity.encode(image), cfg.inversion_refine)?;
    dip_from_trajectory(ck, &traj, mask, cfg, opts)
}

/// DIP starting from a precomputed inversion of the image. Lets several
/// guidance settings share one inversion.
pub fn dip_from_trajectory(
    ck: &Checkpoint,
    traj: &Trajectory<f32>,
    mask: &RemovalMask,
    cfg: &RemovalConfig,
    opts: &RunOptions,
) -> Result<(Tensor<f32>, RemovalTrace)> {
    cfg.validate()?;
    let model = &ck.denoiser;
    check_inputs(model, &traj.x0, mask)?;
    let sched = ck.schedule(cfg.steps)?;
    if traj.steps.len() != cfg.steps || traj.steps.last() != sched.inference_steps().first() {
        return Err(Error::config("inversion trajectory does not match the step count"));
    }
    let z = traj.last().expect("non-empty trajectory").clone();
    guided_loop(model, &sched, Codec::Identity, z, mask, cfg, opts, |t_prev| {
        traj.at(t_prev)
            .cloned()
            .ok_or_else(|| Error::Timestep(format!("no inversion latent at t = {t_prev}")))
    })
}

/// DDIM inversion of `x0` under the plain network.
pub fn invert(model: &Denoiser, sched: &NoiseSchedule, x0: &Tensor<f32>, refine: usize) -> Result<Trajectory<f32>> {
    sched.ddim_invert(x0, refine, |x, t| model.predict(x, t, AttentionMode::Standard, None))
}

/// Inverts `image` and samples it back without guidance or blending.
pub fn reconstruct(ck: &Checkpoint, image: &Tensor<f32>, steps: usize, refine: usize) -> Result<Tensor<f32>> {
    let model = &ck.denoiser;
    let sched = ck.schedule(steps)?;
    let traj = invert(model, &sched, image, refine)?;
    sched.ddim_sample(traj.last().expect("non-empty trajectory"), |z, t| {
        model.predict(z, t, AttentionMode::Standard, None)
    })
}

#[allow(clippy::too_many_arguments)]
fn guided_loop(
    model: &Denoiser,
    sched: &NoiseSchedule,
    codec: Codec,
    mut z: Tensor<f32>,
    mask: &RemovalMask,
    cfg: &RemovalConfig,
    opts: &RunOptions,
    mut renoise: impl FnMut(usize) -> Result<Tensor<f32>>,
) -> Result<(Tensor<f32>, RemovalTrace)> {
    let started = Instant::now();
    let blend_mask = latent_mask(mask, codec)?;
    let mut trace = RemovalTrace::default();
    let pairs = sched.step_pairs();
    for (i, &(t, t_prev)) in pairs.iter().enumerate() {
        let k = pairs.len() - i;
        let g = cfg.guidance(k)?;
        let (eps, records) = guided_predict_recorded(model, &z, t, mask, &g, opts.exec, opts.record_attention)?;
        let stepped = sched.ddim_step(&z, &eps, t, t_prev)?;
        let x_prev = renoise(t_prev)?;
        z = blend_latents(&stepped, &x_prev, &blend_mask)?;
        trace.timesteps.push(t);
        trace.records.extend(records);
        if opts.keep_latents {
            trace.latents.push((t_prev, z.clone()));
        }
    }
    let out = codec.decode(&z).map(|v| v.clamp(-1.0, 1.0))?;
    trace.seconds = started.elapsed().as_secs_f64();
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    fn checkpoint() -> Checkpoint {
        let mut rng = Rng::new(31);
        let mut d = Denoiser::new(DenoiserConfig::micro(), &mut rng).unwrap();
        for v in d.weights_mut().data_mut() {
            *v += 0.05 * rng.normal() as f32;
        }
        Checkpoint {
            denoiser: d,
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }

    fn image() -> Tensor<f32> {
        Tensor::from_fn(vec![1, 8, 8], |i| crate::io::quantize(((i % 8) as f32 - 3.5) / 4.0)).unwrap()
    }

    fn mask(ck: &Checkpoint, cells: &[usize]) -> RemovalMask {
        let mut m = vec![0.0f32; 64];
        for &c in cells {
            m[c] = 1.0;
        }
        ck.denoiser.removal_mask(Tensor::new(vec![8, 8], m).unwrap()).unwrap()
    }

    fn small(p: Pipeline) -> RemovalConfig {
        RemovalConfig {
            steps: 8,
            ss_cutoff: 6,
            ..RemovalConfig::defaults(p)
        }
    }

    #[test]
    fn default_settings() {
        let sip = RemovalConfig::defaults(Pipeline::Sip);
        assert_eq!((sip.steps, sip.ss_cutoff, sip.s, sip.lambda, sip.seed), (40, 30, 9.0, 0.3, 123));
        let dip = RemovalConfig::defaults(Pipeline::Dip);
        assert_eq!((dip.steps, dip.ss_cutoff, dip.s, dip.lambda), (50, 40, 9.0, 0.3));
    }

    #[test]
    fn ss_window_is_closed() {
        let c = RemovalConfig::defaults(Pipeline::Sip);
        let window: Vec<usize> = (1..=40).filter(|&k| c.in_ss_window(k)).collect();
        assert_eq!(window, (30..=40).collect::<Vec<_>>());
        assert!(matches!(c.guidance(30).unwrap().perturbed, AttentionMode::AasSs { .. }));
        assert_eq!(c.guidance(29).unwrap().perturbed, AttentionMode::Aas);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = RemovalConfig::defaults(Pipeline::Sip);
        for bad in [
            RemovalConfig { ss_cutoff: 41, ..base.clone() },
            RemovalConfig { ss_cutoff: 0, ..base.clone() },
            RemovalConfig { s: -1.0, ..base.clone() },
            RemovalConfig { lambda: 1.2, ..base.clone() },
            RemovalConfig { steps: 0, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn blend_endpoints_and_checkerboard() {
        let z = Tensor::from_fn(vec![2, 2, 2], |i| i as f32).unwrap();
        let x = Tensor::from_fn(vec![2, 2, 2], |i| -(i as f32) - 1.0).unwrap();
        let zeros = Tensor::zeros(vec![2, 2]);
        let ones = Tensor::full(vec![2, 2], 1.0);
        assert_eq!(blend_latents(&z, &x, &zeros).unwrap(), x);
        assert_eq!(blend_latents(&z, &x, &ones).unwrap(), z);
        let checker = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = blend_latents(&z, &x, &checker).unwrap();
        let expected: Vec<f32> = (0..8)
            .map(|i| if [0, 3].contains(&(i % 4)) { z.data()[i] } else { x.data()[i] })
            .collect();
        assert_eq!(b.data(), expected.as_slice());
        assert!(blend_latents(&z, &x, &Tensor::zeros(vec![3, 3])).is_err());
    }

    #[test]
    fn background_is_preserved_exactly() {
        let ck = checkpoint();
        let img = image();
        let cells = [18, 19, 26, 27, 28];
        let m = mask(&ck, &cells);
        for p in [Pipeline::Sip, Pipeline::Dip] {
            for s in [0.0, 9.0] {
                let cfg = RemovalConfig { s, ..small(p) };
                let (out, _) = remove(&ck, &img, &m, &cfg, &RunOptions::default()).unwrap();
                for i in (0..64).filter(|i| !cells.contains(i)) {
                    assert_eq!(out.data()[i], img.data()[i], "{p:?} s={s} pixel {i}");
                }
            }
        }
    }

    #[test]
    fn empty_mask_returns_input() {
        let ck = checkpoint();
        let img = image();
        let m = mask(&ck, &[]);
        for p in [Pipeline::Sip, Pipeline::Dip] {
            let (out, _) = remove(&ck, &img, &m, &small(p), &RunOptions::default()).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn dip_is_deterministic_and_sip_depends_only_on_seed() {
        let ck = checkpoint();
        let img = image();
        let m = mask(&ck, &[10, 11, 12]);
        let opts = RunOptions::default();
        let dip = small(Pipeline::Dip);
        assert_eq!(remove(&ck, &img, &m, &dip, &opts).unwrap().0, remove(&ck, &img, &m, &dip, &opts).unwrap().0);
        let sip = small(Pipeline::Sip);
        let a = remove(&ck, &img, &m, &sip, &opts).unwrap().0;
        assert_eq!(a, remove(&ck, &img, &m, &sip, &opts).unwrap().0);
        let other = RemovalConfig { seed: 7, ..sip };
        let b = remove(&ck, &img, &m, &other, &opts).unwrap().0;
        assert_ne!(a, b);
        for i in (0..64).filter(|i| ![10, 11, 12].contains(i)) {
            assert_eq!(a.data()[i], b.data()[i]);
        }
    }

    #[test]
    fn trace_keeps_records_and_latents() {
        let ck = checkpoint();
        let m = mask(&ck, &[0, 1]);
        let opts = RunOptions {
            record_attention: true,
            keep_latents: true,
            ..RunOptions::default()
        };
        let (_, trace) = remove(&ck, &image(), &m, &small(Pipeline::Sip), &opts).unwrap();
        assert_eq!(trace.timesteps, vec![1000, 875, 750, 625, 500, 375, 250, 125]);
        assert_eq!(trace.latents.len(), 8);
        // 3 attention layers per branch, 2 branches, 8 steps
        assert_eq!(trace.records.len(), 48);
        let modes: Vec<_> = trace.records.iter().filter(|r| r.layer == "dec.4").map(|r| r.mode.tag()).collect();
        assert_eq!(&modes[..6], ["standard", "aas_ss", "standard", "aas_ss", "standard", "aas_ss"]);
        assert_eq!(modes[6..8], ["standard", "aas"]);
        let back = AttentionRecord::<f32>::all_from_archive(&trace.to_archive()).unwrap();
        assert_eq!(back.len(), 48);
    }

    #[test]
    fn wrong_pipeline_and_shapes_are_rejected() {
        let ck = checkpoint();
        let m = mask(&ck, &[0]);
        let sip = small(Pipeline::Sip);
        assert!(dip_remove(&ck, &image(), &m, &sip, &RunOptions::default()).is_err());
        let big = Tensor::zeros(vec![1, 16, 16]);
        assert!(matches!(
            sip_remove(&ck, &big, &m, &sip, &RunOptions::default()),
            Err(Error::Dimension(_))
        ));
    }
}
