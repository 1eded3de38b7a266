use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// `x <- x - eta * grad`.
    #[default]
    Plain,
    /// One Adam step per guided timestep, moments kept for the trajectory.
    Adam,
}

/// Parameters of the bundled toy denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDenoiserConfig {
    /// Noise level at the first (noisiest) step.
    pub rho0: f64,
    /// Spread of the toy's Gaussian prior around the base prediction.
    /// Larger values let guidance persist at higher noise levels.
    pub prior_scale: f64,
    /// Radius in pixels of the decoder's Gaussian footprint; 0 decodes
    /// each latent pixel independently.
    pub decoder_radius: usize,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            rho0: 1.0,
            prior_scale: 0.5,
            decoder_radius: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Minimum point confidence kept by the geometry filter.
    pub tau_c: f64,
    /// Voxel side as a multiple of the median nearest-neighbour distance.
    pub alpha: f64,
    /// Minimum number of distinct views per voxel.
    pub n_min: usize,
    /// Relative depth tolerance of the visibility test.
    pub eps_vis: f64,
    /// Huber threshold of the consistency loss.
    pub delta_huber: f64,
    /// Fraction of denoising steps (the least noisy ones) that are guided.
    pub guide_fraction: f64,
    /// Guidance step size.
    pub eta: f64,
    /// Outlier cut-off as a multiple of the voxel dispersion.
    pub k_out: f64,
    pub holdout_fraction: f64,
    pub num_steps: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub toy: ToyDenoiserConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_c: 0.35,
            alpha: 2.5,
            n_min: 2,
            eps_vis: 0.05,
            delta_huber: 1.0,
            guide_fraction: 0.8,
            eta: 0.05,
            k_out: 3.0,
            holdout_fraction: 0.2,
            num_steps: 50,
            optimizer: Optimizer::Plain,
            seed: 0,
            toy: ToyDenoiserConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must lie in (0, 1], got {v}")))
            }
        };
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        unit("tau_c", self.tau_c)?;
        unit("guide_fraction", self.guide_fraction)?;
        unit("holdout_fraction", self.holdout_fraction)?;
        if self.holdout_fraction >= 1.0 {
            return Err(Error::InvalidArgument("holdout_fraction must be below 1".into()));
        }
        positive("alpha", self.alpha)?;
        positive("eps_vis", self.eps_vis)?;
        positive("delta_huber", self.delta_huber)?;
        positive("eta", self.eta)?;
        positive("k_out", self.k_out)?;
        positive("toy.rho0", self.toy.rho0)?;
        positive("toy.prior_scale", self.toy.prior_scale)?;
        if self.n_min < 2 {
            return Err(Error::InvalidArgument(format!("n_min must be at least 2, got {}", self.n_min)));
        }
        if self.num_steps == 0 {
            return Err(Error::InvalidArgument("num_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tau_c, 0.35);
        assert_eq!(c.alpha, 2.5);
        assert_eq!(c.n_min, 2);
        assert_eq!(c.eps_vis, 0.05);
        assert_eq!(c.delta_huber, 1.0);
        assert_eq!(c.guide_fraction, 0.8);
        assert_eq!(c.holdout_fraction, 0.2);
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = [
            PipelineConfig { tau_c: 0.0, ..Default::default() },
            PipelineConfig { guide_fraction: 1.5, ..Default::default() },
            PipelineConfig { n_min: 1, ..Default::default() },
            PipelineConfig { eta: -1.0, ..Default::default() },
            PipelineConfig { holdout_fraction: 1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"eta": 0.1, "optimizer": "adam"}"#).unwrap();
        assert_eq!(c.eta, 0.1);
        assert_eq!(c.optimizer, Optimizer::Adam);
        assert_eq!(c.num_steps, 50);
    }
}
