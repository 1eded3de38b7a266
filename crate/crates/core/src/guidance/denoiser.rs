//! The denoiser contract and a closed-form toy implementation.

use crate::config::ToyDenoiserConfig;
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Latent state of a sampling trajectory.
pub type Latent = Raster<f64>;

/// An iterative sampler seen through the four operations guidance needs.
///
/// Steps run from `num_steps() - 1` (noisiest) down to `0`. Image-space
/// quantities are clean intrinsic estimates; any decoder between latent
/// and image space lives behind [`Denoiser::predict_clean`] and its adjoint
/// [`Denoiser::pullback`].
pub trait Denoiser: Send + Sync {
    fn num_steps(&self) -> usize;

    fn init_latent(&self, seed: u64) -> Result<Latent>;

    /// Clean estimate of the sample at `step` given the current latent.
    fn predict_clean(&self, latent: &Latent, step: usize) -> Result<Raster<f64>>;

    /// Vector-Jacobian product of `predict_clean` at `latent`: maps an
    /// image-space gradient to the latent. Linear in `grad`.
    fn pullback(&self, latent: &Latent, step: usize, grad: &Raster<f64>) -> Result<Latent>;

    /// One scheduler step from `step` to `step - 1`.
    fn advance(&self, latent: &Latent, step: usize, clean: &Raster<f64>) -> Result<Latent>;

    /// Image of the latent left after the final `advance`.
    fn decode(&self, latent: &Latent) -> Result<Raster<f64>>;
}

/// Deterministic sampler around a fixed base prediction `B`.
///
/// The noise level falls linearly, `rho(t) = rho0 (t + 1) / T`, reaching
/// zero after the last step. The clean estimate is the posterior mean of a
/// Gaussian prior `N(B, s^2)`:
///
/// ```text
/// Y_t = B + k_t * D(x_t - B),    k_t = s^2 / (s^2 + rho(t)^2) = 1 - gamma_t
/// ```
///
/// where `D` is a symmetric, zero-padded Gaussian decoder footprint
/// (identity for radius 0). The scheduler step is the deterministic DDIM
/// update `x_{t-1} = Y_t + rho(t-1)/rho(t) (x_t - Y_t)`. The trajectory
/// starts at `B`, so an unguided run reproduces `B` exactly.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    base: Raster<f64>,
    num_steps: usize,
    rho0: f64,
    prior_scale: f64,
    kernel: Vec<f64>,
}

impl ToyDenoiser {
    pub fn new(base: Raster<f64>, num_steps: usize, config: &ToyDenoiserConfig) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidArgument("toy denoiser needs at least one step".into()));
        }
        if !(config.rho0 > 0.0 && config.prior_scale > 0.0) {
            return Err(Error::InvalidArgument("toy denoiser scales must be positive".into()));
        }
        Ok(Self {
            base,
            num_steps,
            rho0: config.rho0,
            prior_scale: config.prior_scale,
            kernel: gaussian_kernel(config.decoder_radius),
        })
    }

    pub fn base(&self) -> &Raster<f64> {
        &self.base
    }

    /// Noise level after `steps_left` more steps; `noise_level(-1) == 0`.
    pub fn noise_level(&self, step: isize) -> f64 {
        self.rho0 * (step + 1).max(0) as f64 / self.num_steps as f64
    }

    /// Weight `gamma_t` of the base prediction in the clean estimate.
    pub fn gamma(&self, step: usize) -> f64 {
        1.0 - self.keep(step)
    }

    /// `1 - gamma_t`: how much of the latent deviation survives in the
    /// clean estimate.
    pub fn keep(&self, step: usize) -> f64 {
        let rho = self.noise_level(step as isize);
        let s2 = self.prior_scale * self.prior_scale;
        s2 / (s2 + rho * rho)
    }

    fn check(&self, r: &Raster<f64>, what: &str) -> Result<()> {
        if !r.same_shape(&self.base) {
            return Err(Error::ShapeMismatch(format!(
                "{what} is {:?}, denoiser works on {:?}",
                r.shape(),
                self.base.shape()
            )));
        }
        Ok(())
    }

    fn decode_footprint(&self, field: &Raster<f64>) -> Raster<f64> {
        if self.kernel.len() == 1 {
            return field.clone();
        }
        separable_filter(field, &self.kernel)
    }
}

impl Denoiser for ToyDenoiser {
    fn num_steps(&self) -> usize {
        self.num_steps
    }

    fn init_latent(&self, _seed: u64) -> Result<Latent> {
        Ok(self.base.clone())
    }

    fn predict_clean(&self, latent: &Latent, step: usize) -> Result<Raster<f64>> {
        self.check(latent, "latent")?;
        let keep = self.keep(step);
        let mut dev = latent.clone();
        for (d, b) in dev.data_mut().iter_mut().zip(self.base.data()) {
            *d -= b;
        }
        let mut out = self.decode_footprint(&dev);
        for (o, b) in out.data_mut().iter_mut().zip(self.base.data()) {
            *o = b + keep * *o;
        }
        Ok(out)
    }

    fn pullback(&self, latent: &Latent, step: usize, grad: &Raster<f64>) -> Result<Latent> {
        self.check(latent, "latent")?;
        self.check(grad, "gradient")?;
        let keep = self.keep(step);
        let mut out = self.decode_footprint(grad);
        for v in out.data_mut() {
            *v *= keep;
        }
        Ok(out)
    }

    fn advance(&self, latent: &Latent, step: usize, clean: &Raster<f64>) -> Result<Latent> {
        self.check(latent, "latent")?;
        self.check(clean, "clean estimate")?;
        let ratio = self.noise_level(step as isize - 1) / self.noise_level(step as isize);
        let mut out = clean.clone();
        for (o, x) in out.data_mut().iter_mut().zip(latent.data()) {
            *o += ratio * (x - *o);
        }
        Ok(out)
    }

    fn decode(&self, latent: &Latent) -> Result<Raster<f64>> {
        self.check(latent, "latent")?;
        Ok(latent.clone())
    }
}

/// Normalised Gaussian taps with sigma = radius / 2; `[1.0]` for radius 0.
fn gaussian_kernel(radius: usize) -> Vec<f64> {
    if radius == 0 {
        return vec![1.0];
    }
    let sigma = radius as f64 / 2.0;
    let taps: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Zero-padded separable filter. With a symmetric kernel the operator is
/// self-adjoint.
fn separable_filter(field: &Raster<f64>, kernel: &[f64]) -> Raster<f64> {
    let (h, w, c) = field.shape();
    let r = (kernel.len() / 2) as isize;
    let horizontal = Raster::from_fn(h, w, c, |row, col, ch| {
        kernel
            .iter()
            .enumerate()
            .filter_map(|(k, tap)| {
                let cc = col as isize + k as isize - r;
                (0..w as isize).contains(&cc).then(|| tap * field.get(row, cc as usize, ch))
            })
            .sum::<f64>()
    });
    Raster::from_fn(h, w, c, |row, col, ch| {
        kernel
            .iter()
            .enumerate()
            .filter_map(|(k, tap)| {
                let rr = row as isize + k as isize - r;
                (0..h as isize).contains(&rr).then(|| tap * horizontal.get(rr as usize, col, ch))
            })
            .sum::<f64>()
    })
}
