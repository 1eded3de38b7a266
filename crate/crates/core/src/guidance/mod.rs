//! Consensus-guided sampling: Huber consistency loss, latent updates and the
//! per-trajectory driver.

mod denoiser;
mod pipeline;

pub use denoiser::{Denoiser, Latent, ToyDenoiser};
pub use pipeline::{consensus_stage, run_pipeline, run_pipeline_with, trajectory_seed, ConsensusSet, PipelineOutput, PipelineWarning};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Optimizer, PipelineConfig};
use crate::consensus::ViewTargets;
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scene::{IntrinsicMap, Modality};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Huber penalty and its derivative.
pub fn huber(residual: f64, delta: f64) -> (f64, f64) {
    debug_assert!(delta > 0.0);
    let a = residual.abs();
    if a <= delta {
        (0.5 * residual * residual, residual)
    } else {
        (delta * (a - 0.5 * delta), delta * residual.signum())
    }
}

/// Weighted Huber loss of `y` against the guide entries of `targets`, and
/// its gradient with respect to `y`. Held-out entries are ignored.
pub fn consensus_loss(y: &Raster<f64>, targets: &ViewTargets, delta: f64) -> Result<(f64, Raster<f64>)> {
    let (h, w, c) = y.shape();
    let mut grad = Raster::zeros(h, w, c);
    let mut loss = 0.0;
    for e in targets.guide_entries() {
        if e.row >= h || e.col >= w {
            return Err(Error::ShapeMismatch(format!(
                "target pixel ({}, {}) outside {h}x{w} prediction",
                e.row, e.col
            )));
        }
        if e.value.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "target has {} channels, prediction has {c}",
                e.value.len()
            )));
        }
        let px = y.pixel(e.row, e.col);
        let g = grad.pixel_mut(e.row, e.col);
        for ch in 0..c {
            let (v, d) = huber(px[ch] - e.value[ch], delta);
            loss += e.weight * v;
            g[ch] += e.weight * d;
        }
    }
    Ok((loss, grad))
}

/// Guided steps, in execution order (`T-1` is the first step executed).
/// Guidance covers the final `ceil(fraction * T)` steps.
pub fn guidance_schedule(num_steps: usize, fraction: f64) -> Result<Vec<usize>> {
    if num_steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("guide fraction {fraction} not in (0, 1]")));
    }
    // The epsilon keeps 0.8 * 10 from rounding up to 9.
    let count = ((fraction * num_steps as f64 - 1e-9).ceil() as usize).clamp(1, num_steps);
    Ok((0..count).rev().collect())
}

/// First and second Adam moments for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// In-place latent update; `adam` is created lazily for [`Optimizer::Adam`].
pub fn latent_update(
    latent: &mut Latent,
    grad: &Latent,
    eta: f64,
    optimizer: Optimizer,
    adam: &mut Option<AdamMoments>,
) -> Result<()> {
    if !latent.same_shape(grad) {
        return Err(Error::ShapeMismatch(format!(
            "latent {:?} vs gradient {:?}",
            latent.shape(),
            grad.shape()
        )));
    }
    match optimizer {
        Optimizer::Plain => {
            for (x, g) in latent.data_mut().iter_mut().zip(grad.data()) {
                *x -= eta * g;
            }
        }
        Optimizer::Adam => {
            let n = grad.data().len();
            let st = adam.get_or_insert_with(|| AdamMoments::new(n));
            if st.m.len() != n {
                return Err(Error::ShapeMismatch("Adam moments do not match the latent".into()));
            }
            st.t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(st.t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(st.t as i32);
            for (i, (x, &g)) in latent.data_mut().iter_mut().zip(grad.data()).enumerate() {
                st.m[i] = ADAM_BETA1 * st.m[i] + (1.0 - ADAM_BETA1) * g;
                st.v[i] = ADAM_BETA2 * st.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                *x -= eta * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(())
}

/// Trajectory-local record of one guided run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceState {
    pub view: usize,
    pub modality: Modality,
    pub guided_steps: Vec<usize>,
    /// `(step, loss)` measured before each guided update.
    pub loss_trace: Vec<(usize, f64)>,
    /// Loss of the returned (clamped) prediction.
    pub final_loss: f64,
    pub adam: Option<AdamMoments>,
}

impl GuidanceState {
    pub fn loss_trace_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (t, l) in &self.loss_trace {
            writeln!(s, "{t},{l}").unwrap();
        }
        s
    }

    pub fn write_loss_trace(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.loss_trace_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Plain sampling loop without any guidance.
pub fn unguided_sample<D: Denoiser + ?Sized>(denoiser: &D, seed: u64) -> Result<Raster<f64>> {
    let mut x = denoiser.init_latent(seed)?;
    for t in (0..denoiser.num_steps()).rev() {
        let y = denoiser.predict_clean(&x, t)?;
        x = denoiser.advance(&x, t, &y)?;
    }
    Ok(clamp_unit(denoiser.decode(&x)?))
}

/// Runs one sampling trajectory with a consistency-guided latent update on
/// the scheduled steps.
pub fn guided_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    targets: &ViewTargets,
    config: &PipelineConfig,
    seed: u64,
) -> Result<(IntrinsicMap, GuidanceState)> {
    let steps = denoiser.num_steps();
    let schedule = guidance_schedule(steps, config.guide_fraction)?;
    let first_guided = schedule.first().copied().unwrap_or(0);
    let active = targets.guide_count() > 0;

    let mut x = denoiser.init_latent(seed)?;
    let mut adam = None;
    let mut trace = Vec::with_capacity(schedule.len());
    for t in (0..steps).rev() {
        let mut y = denoiser.predict_clean(&x, t)?;
        if active && t <= first_guided {
            let (loss, g) = consensus_loss(&y, targets, config.delta_huber)?;
            trace.push((t, loss));
            let gx = denoiser.pullback(&x, t, &g)?;
            latent_update(&mut x, &gx, config.eta, config.optimizer, &mut adam)?;
            y = denoiser.predict_clean(&x, t)?;
        }
        x = denoiser.advance(&x, t, &y)?;
    }
    let out = clamp_unit(denoiser.decode(&x)?);
    let final_loss = consensus_loss(&out, targets, config.delta_huber)?.0;
    let map = IntrinsicMap::from_f64_clamped(targets.modality, &out)?;
    Ok((
        map,
        GuidanceState {
            view: targets.view,
            modality: targets.modality,
            guided_steps: schedule,
            loss_trace: trace,
            final_loss,
            adam,
        },
    ))
}

fn clamp_unit(mut r: Raster<f64>) -> Raster<f64> {
    for v in r.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    r
}
