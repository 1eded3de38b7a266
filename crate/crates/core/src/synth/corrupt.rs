use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::{derive_seed, rng_for, streams};
use crate::scene::{sample_indices, IntrinsicMap, Modality, SceneBundle, ViewFrame};

/// Amplitudes of the prediction error model. All zero means predictions
/// equal ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    /// Per-view, per-channel gain drawn from `[1 - g, 1 + g]`.
    pub gain: f64,
    /// Per-view, per-channel offset drawn from `[-o, o]`.
    pub offset: f64,
    /// Maximum amplitude of each cosine mode of the bias field.
    pub bias_amplitude: f64,
    pub bias_modes: usize,
    /// Maximum spatial frequency of the bias field, cycles per image.
    pub bias_frequency: f64,
    pub noise_sigma: f64,
    /// Chance that a map receives one constant-valued square patch.
    pub outlier_patch_prob: f64,
    pub outlier_patch_size: usize,
    /// Fraction of pixels whose point is perturbed and confidence lowered.
    pub low_confidence_rate: f64,
    /// Confidence of corrupted pixels is drawn from `[0, low_confidence_max)`.
    pub low_confidence_max: f64,
    /// Point perturbation scale relative to depth.
    pub point_jitter: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            gain: 0.15,
            offset: 0.05,
            bias_amplitude: 0.05,
            bias_modes: 3,
            bias_frequency: 1.5,
            noise_sigma: 0.01,
            outlier_patch_prob: 0.3,
            outlier_patch_size: 6,
            low_confidence_rate: 0.05,
            low_confidence_max: 0.3,
            point_jitter: 0.1,
        }
    }
}

impl CorruptionConfig {
    pub fn none() -> Self {
        Self {
            gain: 0.0,
            offset: 0.0,
            bias_amplitude: 0.0,
            bias_modes: 0,
            bias_frequency: 0.0,
            noise_sigma: 0.0,
            outlier_patch_prob: 0.0,
            outlier_patch_size: 0,
            low_confidence_rate: 0.0,
            low_confidence_max: 0.0,
            point_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let amps = [
            self.gain,
            self.offset,
            self.bias_amplitude,
            self.bias_frequency,
            self.noise_sigma,
            self.point_jitter,
            self.low_confidence_max,
        ];
        if amps.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidArgument("corruption amplitudes must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_patch_prob) || !(0.0..=1.0).contains(&self.low_confidence_rate) {
            return Err(Error::InvalidArgument("corruption rates must lie in [0, 1]".into()));
        }
        if self.low_confidence_max > 1.0 {
            return Err(Error::InvalidArgument("low_confidence_max above 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineMode {
    pub amplitude: f64,
    /// Cycles per image along columns and rows.
    pub fx: f64,
    pub fy: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierPatch {
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub value: Vec<f64>,
}

/// Fully drawn error parameters for one map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapCorruption {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    pub bias: Vec<CosineMode>,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub patches: Vec<OutlierPatch>,
}

impl MapCorruption {
    pub fn identity(channels: usize) -> Self {
        Self {
            gain: vec![1.0; channels],
            offset: vec![0.0; channels],
            bias: Vec::new(),
            noise_sigma: 0.0,
            noise_seed: 0,
            patches: Vec::new(),
        }
    }

    fn bias_at(&self, row: usize, col: usize, h: usize, w: usize) -> f64 {
        self.bias
            .iter()
            .map(|m| {
                let arg = 2.0 * PI * (m.fx * col as f64 / w as f64 + m.fy * row as f64 / h as f64) + m.phase;
                m.amplitude * arg.cos()
            })
            .sum()
    }

    /// `clamp(gain * gt + offset + bias + noise)`, then outlier patches.
    pub fn apply(&self, gt: &IntrinsicMap) -> Result<IntrinsicMap> {
        let (h, w, c) = gt.raster().shape();
        if self.gain.len() != c || self.offset.len() != c {
            return Err(Error::ShapeMismatch(format!("corruption for {} channels applied to {c}", self.gain.len())));
        }
        let mut rng = rng_for(self.noise_seed, 0);
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0))
            .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
        let mut out = Raster::<f64>::zeros(h, w, c);
        for row in 0..h {
            for col in 0..w {
                let b = self.bias_at(row, col, h, w);
                let src = gt.pixel(row, col);
                let dst = out.pixel_mut(row, col);
                for ch in 0..c {
                    let n = if self.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    dst[ch] = self.gain[ch] * f64::from(src[ch]) + self.offset[ch] + b + n;
                }
            }
        }
        for p in &self.patches {
            for row in p.row..(p.row + p.size).min(h) {
                for col in p.col..(p.col + p.size).min(w) {
                    out.pixel_mut(row, col).copy_from_slice(&p.value);
                }
            }
        }
        IntrinsicMap::from_f64_clamped(gt.modality(), &out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowConfidencePixel {
    pub row: usize,
    pub col: usize,
    pub confidence: f32,
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewCorruption {
    pub maps: BTreeMap<Modality, MapCorruption>,
    pub low_confidence: Vec<LowConfidencePixel>,
}

impl ViewCorruption {
    pub fn identity(modalities: &[Modality]) -> Self {
        Self {
            maps: modalities.iter().map(|&m| (m, MapCorruption::identity(m.channels()))).collect(),
            low_confidence: Vec::new(),
        }
    }
}

/// Draws the error parameters of one view from `cfg`.
pub fn draw_view_corruption(cfg: &CorruptionConfig, view: &ViewFrame, rng: &mut ChaCha8Rng) -> ViewCorruption {
    let (h, w) = (view.height(), view.width());
    let mut maps = BTreeMap::new();
    for &m in view.gt.keys() {
        let c = m.channels();
        let gain = (0..c).map(|_| 1.0 + cfg.gain * rng.random_range(-1.0..=1.0)).collect();
        let offset = (0..c).map(|_| cfg.offset * rng.random_range(-1.0..=1.0)).collect();
        let bias = (0..cfg.bias_modes)
            .map(|_| CosineMode {
                amplitude: cfg.bias_amplitude * rng.random::<f64>(),
                fx: cfg.bias_frequency * rng.random_range(-1.0..=1.0),
                fy: cfg.bias_frequency * rng.random_range(-1.0..=1.0),
                phase: 2.0 * PI * rng.random::<f64>(),
            })
            .collect();
        let mut patches = Vec::new();
        if cfg.outlier_patch_size > 0 && rng.random::<f64>() < cfg.outlier_patch_prob {
            let size = cfg.outlier_patch_size.min(h).min(w);
            patches.push(OutlierPatch {
                row: rng.random_range(0..=h - size),
                col: rng.random_range(0..=w - size),
                size,
                value: (0..c).map(|_| rng.random::<f64>()).collect(),
            });
        }
        maps.insert(
            m,
            MapCorruption { gain, offset, bias, noise_sigma: cfg.noise_sigma, noise_seed: rng.random(), patches },
        );
    }
    let count = (cfg.low_confidence_rate * (h * w) as f64).round() as usize;
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let low_confidence = sample_indices(h * w, count, rng)
        .into_iter()
        .map(|i| {
            let (row, col) = (i / w, i % w);
            let scale = cfg.point_jitter * view.depth_at(row, col);
            LowConfidencePixel {
                row,
                col,
                confidence: (cfg.low_confidence_max * rng.random::<f64>()) as f32,
                offset: std::array::from_fn(|_| scale * jitter.sample(rng)),
            }
        })
        .collect();
    ViewCorruption { maps, low_confidence }
}

/// Overwrites the view's predictions with corrupted ground truth and
/// applies the geometric corruption to points and confidences.
pub fn apply_view_corruption(view: &mut ViewFrame, corruption: &ViewCorruption) -> Result<()> {
    let mut predictions = BTreeMap::new();
    for (m, gt) in &view.gt {
        let mc = corruption
            .maps
            .get(m)
            .ok_or_else(|| Error::InvalidArgument(format!("no corruption parameters for {m}")))?;
        predictions.insert(*m, mc.apply(gt)?);
    }
    view.predictions = predictions;
    for px in &corruption.low_confidence {
        view.confidence.pixel_mut(px.row, px.col)[0] = px.confidence;
        let p = view.points.pixel_mut(px.row, px.col);
        for i in 0..3 {
            p[i] = (f64::from(p[i]) + px.offset[i]) as f32;
        }
    }
    Ok(())
}

/// Fills every view's predictions from its ground truth through the error
/// model. Each view draws from its own seed stream.
pub fn corrupt_predictions(bundle: &SceneBundle, cfg: &CorruptionConfig, seed: u64) -> Result<SceneBundle> {
    cfg.validate()?;
    if !bundle.has_gt() {
        return Err(Error::InvalidBundle("corruption needs ground truth in every view".into()));
    }
    let views = bundle
        .views
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut rng = rng_for(derive_seed(seed, streams::CORRUPTION), i as u64);
            let c = draw_view_corruption(cfg, v, &mut rng);
            let mut out = v.clone();
            apply_view_corruption(&mut out, &c)?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneBundle { scene_id: bundle.scene_id.clone(), seed: bundle.seed, views })
}
