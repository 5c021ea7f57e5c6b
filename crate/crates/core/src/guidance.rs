//! Self-attention redirection guidance.
//!
//! Each step runs the denoiser twice, once plainly and once with redirected
//! decoder attention, and extrapolates from the plain prediction toward the
//! redirected one: `ε̂ = ε + s·(ε_AAS − ε)`.
//!
//! The same update falls out of treating the redirected network as a
//! discriminator between "object" and "background" scores: both terms are
//! network approximations of those scores, so the guidance needs no
//! computation beyond the two predictions.

use crate::attention::{AttentionMode, AttentionRecord, RemovalMask};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::Tensor;

/// Guidance settings for one inference step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceParams {
    /// Removal guidance scale.
    pub s: f64,
    /// Attention mode of the redirected branch (AAS or AAS+SS).
    pub perturbed: AttentionMode,
}

impl GuidanceParams {
    pub fn new(s: f64, perturbed: AttentionMode) -> Result<Self> {
        if !s.is_finite() || s < 0.0 {
            return Err(Error::config(format!("guidance scale must be ≥ 0, got {s}")));
        }
        if perturbed.is_standard() {
            return Err(Error::config("the redirected branch cannot use standard attention"));
        }
        perturbed.validate()?;
        Ok(Self { s, perturbed })
    }
}

/// `plain + s·(aas − plain)`, evaluated per element in f64.
pub fn sarg_epsilon(plain: &Tensor<f32>, aas: &Tensor<f32>, s: f64) -> Result<Tensor<f32>> {
    plain.zip_map(aas, |p, a| {
        let p = f64::from(p);
        (p + s * (f64::from(a) - p)) as f32
    })
}

/// Guided noise prediction. With `s = 0` only the plain branch runs.
pub fn guided_predict(
    model: &Denoiser,
    z_t: &Tensor<f32>,
    t: usize,
    mask: &RemovalMask,
    params: &GuidanceParams,
    exec: Exec,
) -> Result<Tensor<f32>> {
    Ok(guided_predict_recorded(model, z_t, t, mask, params, exec, false)?.0)
}

/// [`guided_predict`] that optionally also returns the attention records
/// of both branches (plain first).
pub fn guided_predict_recorded(
    model: &Denoiser,
    z_t: &Tensor<f32>,
    t: usize,
    mask: &RemovalMask,
    params: &GuidanceParams,
    exec: Exec,
    record: bool,
) -> Result<(Tensor<f32>, Vec<AttentionRecord>)> {
    let plain = |mode: AttentionMode, m: Option<&RemovalMask>| {
        if record {
            model.predict_recorded(z_t, t, mode, m)
        } else {
            model.predict(z_t, t, mode, m).map(|e| (e, Vec::new()))
        }
    };
    if params.s == 0.0 {
        return plain(AttentionMode::Standard, None);
    }
    let (a, b) = exec.join(
        || plain(AttentionMode::Standard, None),
        || plain(params.perturbed, Some(mask)),
    );
    let ((eps, mut records), (eps_aas, aas_records)) = (a?, b?);
    records.extend(aas_records);
    Ok((sarg_epsilon(&eps, &eps_aas, params.s)?, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::numerics::Rng;

    fn model() -> Denoiser {
        let mut rng = Rng::new(21);
        let mut d = Denoiser::new(DenoiserConfig::micro(), &mut rng).unwrap();
        for v in d.weights_mut().data_mut() {
            *v += 0.1 * rng.normal() as f32;
        }
        d
    }

    fn mask(d: &Denoiser, cells: &[usize]) -> RemovalMask {
        let mut m = vec![0.0f32; 64];
        for &c in cells {
            m[c] = 1.0;
        }
        d.removal_mask(Tensor::new(vec![8, 8], m).unwrap()).unwrap()
    }

    #[test]
    fn sarg_endpoints_and_linearity() {
        let p = Tensor::new(vec![3], vec![0.5f32, -1.0, 2.0]).unwrap();
        let a = Tensor::new(vec![3], vec![1.5f32, 0.25, -2.0]).unwrap();
        assert_eq!(sarg_epsilon(&p, &a, 0.0).unwrap(), p);
        assert_eq!(sarg_epsilon(&p, &a, 1.0).unwrap(), a);
        let zero = Tensor::<f32>::zeros(vec![3]);
        assert_eq!(sarg_epsilon(&zero, &a, 9.0).unwrap(), a.map(|v| 9.0 * v).unwrap());
        let half = sarg_epsilon(&p, &a, 0.5).unwrap();
        assert_eq!(half.data(), &[1.0, -0.375, 0.0]);
    }

    #[test]
    fn sarg_rejects_shape_mismatch() {
        let p = Tensor::<f32>::zeros(vec![3]);
        let a = Tensor::<f32>::zeros(vec![4]);
        assert!(matches!(sarg_epsilon(&p, &a, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn params_validation() {
        assert!(GuidanceParams::new(-1.0, AttentionMode::Aas).is_err());
        assert!(GuidanceParams::new(1.0, AttentionMode::Standard).is_err());
        assert!(GuidanceParams::new(1.0, AttentionMode::AasSs { lambda: 1.5 }).is_err());
        assert!(GuidanceParams::new(9.0, AttentionMode::AasSs { lambda: 0.3 }).is_ok());
    }

    #[test]
    fn zero_scale_is_a_single_standard_prediction() {
        let d = model();
        let m = mask(&d, &[0, 1, 8, 9]);
        let z = Rng::new(1).normal_tensor::<f32>(&[1, 8, 8]);
        let g = GuidanceParams::new(0.0, AttentionMode::Aas).unwrap();
        let (eps, recs) = guided_predict_recorded(&d, &z, 300, &m, &g, Exec::Sequential, true).unwrap();
        assert_eq!(eps, d.predict(&z, 300, AttentionMode::Standard, None).unwrap());
        assert!(recs.iter().all(|r| r.mode.is_standard()));
    }

    #[test]
    fn empty_mask_matches_standard_for_any_scale() {
        let d = model();
        let m = mask(&d, &[]);
        let z = Rng::new(2).normal_tensor::<f32>(&[1, 8, 8]);
        let std = d.predict(&z, 700, AttentionMode::Standard, None).unwrap();
        for s in [0.5, 1.0, 9.0] {
            for mode in [AttentionMode::Aas, AttentionMode::AasSs { lambda: 0.3 }] {
                let g = GuidanceParams::new(s, mode).unwrap();
                assert_eq!(guided_predict(&d, &z, 700, &m, &g, Exec::Parallel).unwrap(), std);
            }
        }
    }

    #[test]
    fn composes_the_two_branches() {
        let d = model();
        let m = mask(&d, &[18, 19, 26, 27]);
        let z = Rng::new(3).normal_tensor::<f32>(&[1, 8, 8]);
        for mode in [AttentionMode::Aas, AttentionMode::AasSs { lambda: 0.3 }] {
            let plain = d.predict(&z, 500, AttentionMode::Standard, None).unwrap();
            let pert = d.predict(&z, 500, mode, Some(&m)).unwrap();
            let g = GuidanceParams::new(9.0, mode).unwrap();
            let got = guided_predict(&d, &z, 500, &m, &g, Exec::Sequential).unwrap();
            assert_eq!(got, sarg_epsilon(&plain, &pert, 9.0).unwrap());
        }
        let ss1 = GuidanceParams::new(4.0, AttentionMode::AasSs { lambda: 1.0 }).unwrap();
        let aas = GuidanceParams::new(4.0, AttentionMode::Aas).unwrap();
        assert_eq!(
            guided_predict(&d, &z, 500, &m, &ss1, Exec::Sequential).unwrap(),
            guided_predict(&d, &z, 500, &m, &aas, Exec::Sequential).unwrap()
        );
    }
}
