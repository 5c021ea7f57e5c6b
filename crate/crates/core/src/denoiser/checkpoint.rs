use std::path::Path;

use super::{Denoiser, DenoiserConfig, Params};
use crate::error::{Error, Result};
use crate::numerics::{Archive, Rng};
use crate::scheduler::NoiseSchedule;

/// Value of the `format` metadata key in a checkpoint archive.
pub const CHECKPOINT_FORMAT: &str = "denoiser-checkpoint";

/// A trained network plus the training schedule it expects.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub denoiser: Denoiser,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Checkpoint {
    /// The training schedule with `inference_steps` sampling steps.
    pub fn schedule(&self, inference_steps: usize) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.train_steps, self.beta_start, self.beta_end, inference_steps)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.set_meta("format", CHECKPOINT_FORMAT);
        for (k, v) in self.denoiser.config().to_entries() {
            a.set_meta(format!("config.{k}"), v);
        }
        a.set_meta("schedule.train_steps", self.train_steps);
        a.set_meta("schedule.beta_start", self.beta_start);
        a.set_meta("schedule.beta_end", self.beta_end);
        let w = self.denoiser.weights();
        for (i, e) in w.entries().iter().enumerate() {
            a.push(e.name.clone(), w.tensor(i));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.meta("format")? != CHECKPOINT_FORMAT {
            return Err(Error::CorruptArchive("archive is not a denoiser checkpoint".into()));
        }
        let config = DenoiserConfig::from_entries(|k| Ok(a.meta(&format!("config.{k}"))?.to_string()))?;
        let parse = |k: &str| -> Result<f64> {
            a.meta(k)?
                .parse()
                .map_err(|_| Error::CorruptArchive(format!("metadata `{k}` is not a number")))
        };
        let train_steps = parse("schedule.train_steps")? as usize;
        let (beta_start, beta_end) = (parse("schedule.beta_start")?, parse("schedule.beta_end")?);
        NoiseSchedule::new(train_steps, beta_start, beta_end, 1)
            .map_err(|e| Error::CorruptArchive(format!("schedule metadata: {e}")))?;
        let template = Denoiser::new(config.clone(), &mut Rng::new(0))?;
        let mut weights: Params<f32> = template.into_weights();
        weights.fill_from(|name| a.get(name).map(|t| t.to_f32()))?;
        if !weights.is_finite() {
            return Err(Error::NonFinite("checkpoint weights".into()));
        }
        Ok(Self {
            denoiser: Denoiser::from_weights(config, weights)?,
            train_steps,
            beta_start,
            beta_end,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, denoiser: &Denoiser, sched: &NoiseSchedule) -> Result<()> {
    let (beta_start, beta_end) = sched.beta_range();
    Checkpoint {
        denoiser: denoiser.clone(),
        train_steps: sched.train_steps(),
        beta_start,
        beta_end,
    }
    .to_archive()
    .save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_archive(&Archive::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMode;

    #[test]
    fn round_trip_preserves_predictions() {
        let d = Denoiser::new(DenoiserConfig::micro(), &mut Rng::new(9)).unwrap();
        let sched = NoiseSchedule::default_with_steps(10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &d, &sched).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.denoiser.weights(), d.weights());
        assert_eq!(ck.schedule(10).unwrap().alpha_bars(), sched.alpha_bars());
        let z = Rng::new(1).normal_tensor::<f32>(&[1, 8, 8]);
        let a = d.predict(&z, 100, AttentionMode::Standard, None).unwrap();
        let b = ck.denoiser.predict(&z, 100, AttentionMode::Standard, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let d = Denoiser::new(DenoiserConfig::micro(), &mut Rng::new(9)).unwrap();
        let sched = NoiseSchedule::default_with_steps(10).unwrap();
        let ck = Checkpoint {
            denoiser: d,
            train_steps: sched.train_steps(),
            beta_start: 1e-4,
            beta_end: 0.02,
        };
        let mut bytes = ck.to_archive().to_bytes().unwrap();
        bytes[4] = 7;
        bytes[5] = 0;
        assert!(matches!(
            Archive::from_bytes(&bytes),
            Err(Error::ArchiveVersion { found: 7, .. })
        ));
    }

    #[test]
    fn missing_weight_is_corrupt() {
        let d = Denoiser::new(DenoiserConfig::micro(), &mut Rng::new(9)).unwrap();
        let ck = Checkpoint {
            denoiser: d,
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        };
        let mut a = ck.to_archive();
        a.tensors.pop();
        assert!(matches!(Checkpoint::from_archive(&a), Err(Error::CorruptArchive(_))));
    }
}
