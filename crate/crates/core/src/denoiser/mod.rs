//! Small U-Net noise predictor with swappable decoder self-attention.

mod checkpoint;
mod config;
mod layers;
mod params;
mod train;
mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use config::{AttentionLayerInfo, DenoiserConfig, Placement};
pub use params::{ParamEntry, Params, Weights};
pub use train::{fit, train, TrainOptions, TrainReport};

use crate::attention::{AttentionMode, AttentionRecord, RemovalMask};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use unet::{Ctx, Unet};

/// A network structure paired with its weights.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    net: Unet,
    weights: Weights,
}

impl Denoiser {
    /// Freshly initialized network.
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        let (net, layout) = Unet::new(&config)?;
        let weights = Params::initialize(&layout, rng);
        Ok(Self {
            config,
            net,
            weights,
        })
    }

    /// Wraps existing weights, checking they fit the configured layout.
    pub fn from_weights(config: DenoiserConfig, weights: Weights) -> Result<Self> {
        let (net, layout) = Unet::new(&config)?;
        if weights.entries() != layout.entries.as_slice() {
            return Err(Error::CorruptArchive(
                "weight layout does not match the network configuration".into(),
            ));
        }
        Ok(Self {
            config,
            net,
            weights,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn into_weights(self) -> Weights {
        self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    pub fn attention_layers(&self) -> Vec<AttentionLayerInfo> {
        self.config.attention_layers()
    }

    /// Builds a removal mask flattened to every attention resolution.
    pub fn removal_mask(&self, base: Tensor<f32>) -> Result<RemovalMask> {
        let (h, w) = base.dims2()?;
        if h != self.config.image_size || w != self.config.image_size {
            return Err(Error::dim(format!(
                "mask is {h}×{w}, model expects {0}×{0}",
                self.config.image_size
            )));
        }
        RemovalMask::new(base, &self.config.mask_resolutions())
    }

    fn check_input(&self, z: &Tensor<f32>) -> Result<()> {
        let c = &self.config;
        if z.shape() != [c.channels, c.image_size, c.image_size] {
            return Err(Error::dim(format!(
                "latent has shape {:?}, model expects [{}, {2}, {2}]",
                z.shape(),
                c.channels,
                c.image_size
            )));
        }
        Ok(())
    }

    /// Noise prediction `ε_θ(z_t, t)` with decoder attention in `mode`.
    pub fn predict(
        &self,
        z_t: &Tensor<f32>,
        t: usize,
        mode: AttentionMode,
        mask: Option<&RemovalMask>,
    ) -> Result<Tensor<f32>> {
        Ok(self.run(z_t, t, mode, mask, false)?.0)
    }

    /// Like [`predict`](Self::predict) but also returns every attention
    /// layer's record for this call.
    pub fn predict_recorded(
        &self,
        z_t: &Tensor<f32>,
        t: usize,
        mode: AttentionMode,
        mask: Option<&RemovalMask>,
    ) -> Result<(Tensor<f32>, Vec<AttentionRecord>)> {
        self.run(z_t, t, mode, mask, true)
    }

    fn run(
        &self,
        z_t: &Tensor<f32>,
        t: usize,
        mode: AttentionMode,
        mask: Option<&RemovalMask>,
        record: bool,
    ) -> Result<(Tensor<f32>, Vec<AttentionRecord>)> {
        self.check_input(z_t)?;
        mode.validate()?;
        let ctx = Ctx {
            t,
            mode,
            mask,
            record,
        };
        let (eps, _, records) = self.net.forward(&self.weights, z_t.data(), &ctx)?;
        let eps = Tensor::new(z_t.shape().to_vec(), eps)?;
        Ok((eps, records))
    }

    /// Names of the decoder attention output projections.
    pub fn decoder_attention_output_names(&self) -> Vec<String> {
        self.net
            .decoder_attention_outputs()
            .into_iter()
            .map(|id| self.weights.entries()[id.0].name.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Real;

    fn loss_and_grad<R: Real>(
        net: &Unet,
        p: &Params<R>,
        x: &[R],
        t: usize,
        target: &[R],
    ) -> (f64, Params<R>) {
        let ctx = Ctx {
            t,
            mode: AttentionMode::Standard,
            mask: None,
            record: false,
        };
        let (y, tape, _) = net.forward(p, x, &ctx).unwrap();
        let n = y.len() as f64;
        let loss = y
            .iter()
            .zip(target)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            / n;
        let dy: Vec<R> = y
            .iter()
            .zip(target)
            .map(|(a, b)| R::lit(2.0 * (a.as_f64() - b.as_f64()) / n))
            .collect();
        (loss, net.backward(p, &tape, &dy))
    }

    #[test]
    fn micro_network_is_small() {
        let d = Denoiser::new(DenoiserConfig::micro(), &mut Rng::new(1)).unwrap();
        assert!(d.param_count() <= 5000, "{}", d.param_count());
    }

    #[test]
    fn default_network_size() {
        let d = Denoiser::new(DenoiserConfig::default(), &mut Rng::new(1)).unwrap();
        let n = d.param_count();
        assert!((300_000..2_000_000).contains(&n), "{n}");
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let cfg = DenoiserConfig::micro();
        let (net, layout) = Unet::new(&cfg).unwrap();
        let mut rng = Rng::new(11);
        let mut p: Params<f64> = Params::initialize(&layout, &mut rng);
        // Zero-initialized layers would hide most of the network.
        for v in p.data_mut() {
            *v += 0.2 * rng.normal();
        }
        let size = cfg.channels * cfg.image_size * cfg.image_size;
        let x: Vec<f64> = (0..size).map(|_| rng.normal()).collect();
        let target: Vec<f64> = (0..size).map(|_| rng.normal()).collect();
        let t = 337;
        let (_, g) = loss_and_grad(&net, &p, &x, t, &target);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..p.len() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + h;
            let (lp, _) = loss_and_grad(&net, &p, &x, t, &target);
            p.data_mut()[i] = orig - h;
            let (lm, _) = loss_and_grad(&net, &p, &x, t, &target);
            p.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = g.data()[i];
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-3, "worst relative gradient error {worst}");
    }

    #[test]
    fn standard_mode_ignores_mask() {
        let cfg = DenoiserConfig::micro();
        let d = Denoiser::new(cfg.clone(), &mut Rng::new(2)).unwrap();
        let z = Rng::new(3).normal_tensor::<f32>(&[1, 8, 8]);
        let mut m = vec![0.0f32; 64];
        m[9] = 1.0;
        let mask = d.removal_mask(Tensor::new(vec![8, 8], m).unwrap()).unwrap();
        let a = d.predict(&z, 500, AttentionMode::Standard, None).unwrap();
        let b = d.predict(&z, 500, AttentionMode::Standard, Some(&mask)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mode_only_changes_output_through_decoder_attention() {
        let cfg = DenoiserConfig::micro();
        let mut rng = Rng::new(5);
        let mut d = Denoiser::new(cfg, &mut rng).unwrap();
        for v in d.weights_mut().data_mut() {
            *v += 0.1 * rng.normal() as f32;
        }
        let z = rng.normal_tensor::<f32>(&[1, 8, 8]);
        let mut m = vec![0.0f32; 64];
        m[0..3].fill(1.0);
        let mask = d.removal_mask(Tensor::new(vec![8, 8], m).unwrap()).unwrap();
        let std = d.predict(&z, 400, AttentionMode::Standard, None).unwrap();
        let aas = d.predict(&z, 400, AttentionMode::Aas, Some(&mask)).unwrap();
        assert!(std.max_abs_diff(&aas).unwrap() > 1e-4);
        for name in d.decoder_attention_output_names() {
            d.weights_mut().by_name_mut(&name).unwrap().fill(0.0);
        }
        let std = d.predict(&z, 400, AttentionMode::Standard, None).unwrap();
        for mode in [AttentionMode::Aas, AttentionMode::AasSs { lambda: 0.3 }] {
            let other = d.predict(&z, 400, mode, Some(&mask)).unwrap();
            assert_eq!(std, other);
        }
    }

    #[test]
    fn records_cover_every_attention_layer() {
        let d = Denoiser::new(DenoiserConfig::micro(), &mut Rng::new(0)).unwrap();
        let z = Rng::new(1).normal_tensor::<f32>(&[1, 8, 8]);
        let (_, recs) = d.predict_recorded(&z, 10, AttentionMode::Standard, None).unwrap();
        let names: Vec<_> = recs.iter().map(|r| r.layer.as_str()).collect();
        assert_eq!(names, ["enc.4", "mid.4", "dec.4"]);
        for r in &recs {
            assert_eq!(r.attention.shape(), &[16, 16]);
            for row in 0..16 {
                let s: f32 = r.attention.row(row).iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn wrong_latent_shape_is_rejected() {
        let d = Denoiser::new(DenoiserConfig::micro(), &mut Rng::new(0)).unwrap();
        let z = Tensor::<f32>::zeros(vec![1, 4, 4]);
        assert!(matches!(
            d.predict(&z, 10, AttentionMode::Standard, None),
            Err(Error::Dimension(_))
        ));
    }
}
