//! Cross-view consistency and per-view quality metrics, and the seeded
//! experiment over view-subset sizes.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::consensus::VoxelConsensus;
use crate::error::{Error, Result};
use crate::guidance::{run_pipeline, PipelineOutput};
use crate::raster::Raster;
use crate::rng::derive_seed;
pub use crate::stats::median;
use crate::scene::{choose_views, subsample_views, IntrinsicMap, Modality, SceneBundle};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Unscaled median absolute deviation.
pub fn mad(values: &[f64]) -> f64 {
    let m = median(&mut values.to_vec());
    let mut dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&mut dev)
}

/// Per-view values of one voxel: each view contributes the mean, over its
/// observations in the voxel, of the channel-mean prediction.
pub fn voxel_view_values(
    voxel: &VoxelConsensus,
    predictions: &[BTreeMap<Modality, IntrinsicMap>],
    modality: Modality,
) -> Result<Vec<f64>> {
    let mut per_view: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for o in &voxel.observations {
        let map = predictions
            .get(o.view)
            .and_then(|p| p.get(&modality))
            .ok_or_else(|| Error::InvalidArgument(format!("no {modality} prediction for view {}", o.view)))?;
        let px = map.pixel(o.row, o.col);
        let v = px.iter().map(|&x| f64::from(x)).sum::<f64>() / px.len() as f64;
        let acc = per_view.entry(o.view).or_insert((0.0, 0));
        acc.0 += v;
        acc.1 += 1;
    }
    Ok(per_view.values().map(|(s, n)| s / *n as f64).collect())
}

/// Mean over `voxels` of the cross-view MAD, per modality.
pub fn consistency_mad(
    predictions: &[BTreeMap<Modality, IntrinsicMap>],
    voxels: &[&VoxelConsensus],
    modalities: &[Modality],
) -> Result<BTreeMap<Modality, f64>> {
    if voxels.is_empty() {
        return Err(Error::Empty("no held-out voxels to evaluate"));
    }
    modalities
        .iter()
        .map(|&m| {
            let total = voxels
                .iter()
                .map(|v| voxel_view_values(v, predictions, m).map(|vals| mad(&vals)))
                .sum::<Result<f64>>()?;
            Ok((m, total / voxels.len() as f64))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityMetrics {
    /// `+inf` for identical images (serialised as `null`).
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
}

pub fn mse(a: &Raster<f64>, b: &Raster<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64
}

/// Peak-1 PSNR in dB.
pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable filtering over positions whose window lies fully inside.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..n).map(|i| k[i] * img[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

/// Gaussian-window SSIM with unit dynamic range, averaged over channels.
pub fn ssim(a: &Raster<f64>, b: &Raster<f64>) -> Result<f64> {
    let (h, w, ch) = a.shape();
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!("SSIM of {:?} and {:?}", a.shape(), b.shape())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let k = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for c in 0..ch {
        let x: Vec<f64> = (0..h * w).map(|i| a.data()[i * ch + c]).collect();
        let y: Vec<f64> = (0..h * w).map(|i| b.data()[i * ch + c]).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let (mx, _, _) = filter_valid(&x, h, w, &k);
        let (my, _, _) = filter_valid(&y, h, w, &k);
        let (mxx, _, _) = filter_valid(&prod(&x, &x), h, w, &k);
        let (myy, _, _) = filter_valid(&prod(&y, &y), h, w, &k);
        let (mxy, _, _) = filter_valid(&prod(&x, &y), h, w, &k);
        let s: f64 = (0..mx.len())
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = mxx[i] - ux * ux;
                let vy = myy[i] - uy * uy;
                let cxy = mxy[i] - ux * uy;
                ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
            })
            .sum();
        total += s / mx.len() as f64;
    }
    Ok(total / ch as f64)
}

pub fn quality_metrics(pred: &IntrinsicMap, gt: &IntrinsicMap) -> Result<QualityMetrics> {
    let (p, g) = (pred.raster().to_f64(), gt.raster().to_f64());
    if !p.same_shape(&g) {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", p.shape(), g.shape())));
    }
    let e = mse(&p, &g);
    Ok(QualityMetrics { psnr: psnr(e), ssim: ssim(&p, &g)?, rmse: e.sqrt() })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if !mean.is_finite() {
            return Stat { mean, std: f64::NAN };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

/// Metrics of one modality in one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityRun {
    pub modality: Modality,
    pub mad_guided: f64,
    pub mad_unguided: f64,
    /// View-averaged quality against ground truth, when available.
    pub guided: Option<QualityMetrics>,
    pub unguided: Option<QualityMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub view_count: usize,
    pub seed: u64,
    pub views: Vec<usize>,
    pub holdout_voxels: usize,
    pub degenerate: bool,
    pub modalities: Vec<ModalityRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalitySummary {
    pub modality: Modality,
    pub mad_guided: Stat,
    pub mad_unguided: Stat,
    pub psnr_guided: Option<Stat>,
    pub psnr_unguided: Option<Stat>,
    pub ssim_guided: Option<Stat>,
    pub ssim_unguided: Option<Stat>,
    pub rmse_guided: Option<Stat>,
    pub rmse_unguided: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub view_count: usize,
    pub seeds: Vec<u64>,
    /// How multi-channel values enter the MAD.
    pub mad_reduction: &'static str,
    pub config: PipelineConfig,
    pub modalities: Vec<ModalitySummary>,
    pub runs: Vec<RunRecord>,
}

impl EvalReport {
    pub fn modality(&self, m: Modality) -> Option<&ModalitySummary> {
        self.modalities.iter().find(|s| s.modality == m)
    }

    /// Aggregates runs that share a view count.
    pub fn from_runs(view_count: usize, config: &PipelineConfig, runs: Vec<RunRecord>) -> Result<Self> {
        let first = runs.first().ok_or(Error::Empty("report without runs"))?;
        let modalities = first
            .modalities
            .iter()
            .enumerate()
            .map(|(k, mr)| {
                let col = |f: &dyn Fn(&ModalityRun) -> f64| runs.iter().map(|r| f(&r.modalities[k])).collect::<Vec<_>>();
                let quality = |pick: &dyn Fn(&ModalityRun) -> Option<QualityMetrics>, f: fn(&QualityMetrics) -> f64| {
                    runs.iter()
                        .map(|r| pick(&r.modalities[k]).map(|q| f(&q)))
                        .collect::<Option<Vec<f64>>>()
                        .map(|v| Stat::of(&v))
                };
                ModalitySummary {
                    modality: mr.modality,
                    mad_guided: Stat::of(&col(&|m| m.mad_guided)),
                    mad_unguided: Stat::of(&col(&|m| m.mad_unguided)),
                    psnr_guided: quality(&|m| m.guided, |q| q.psnr),
                    psnr_unguided: quality(&|m| m.unguided, |q| q.psnr),
                    ssim_guided: quality(&|m| m.guided, |q| q.ssim),
                    ssim_unguided: quality(&|m| m.unguided, |q| q.ssim),
                    rmse_guided: quality(&|m| m.guided, |q| q.rmse),
                    rmse_unguided: quality(&|m| m.unguided, |q| q.rmse),
                }
            })
            .collect();
        Ok(Self {
            view_count,
            seeds: runs.iter().map(|r| r.seed).collect(),
            mad_reduction: "channel-mean per observation, mean per view",
            config: config.clone(),
            modalities,
            runs,
        })
    }
}

/// View-averaged quality of `preds` against the bundle's ground truth.
fn mean_quality(bundle: &SceneBundle, preds: &[BTreeMap<Modality, IntrinsicMap>], m: Modality) -> Result<Option<QualityMetrics>> {
    if !bundle.has_gt() {
        return Ok(None);
    }
    let per_view = bundle
        .views
        .iter()
        .zip(preds)
        .map(|(v, p)| {
            let pred = p.get(&m).ok_or_else(|| Error::InvalidArgument(format!("missing {m} prediction")))?;
            let gt = v.gt.get(&m).ok_or_else(|| Error::InvalidBundle(format!("missing {m} ground truth")))?;
            quality_metrics(pred, gt)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_view.len() as f64;
    Ok(Some(QualityMetrics {
        psnr: per_view.iter().map(|q| q.psnr).sum::<f64>() / n,
        ssim: per_view.iter().map(|q| q.ssim).sum::<f64>() / n,
        rmse: per_view.iter().map(|q| q.rmse).sum::<f64>() / n,
    }))
}

/// Scores guided and unguided predictions on the same held-out voxels.
pub fn evaluate_predictions(
    bundle: &SceneBundle,
    voxels: &[VoxelConsensus],
    holdout: &[bool],
    guided: &[BTreeMap<Modality, IntrinsicMap>],
    unguided: &[BTreeMap<Modality, IntrinsicMap>],
) -> Result<Vec<ModalityRun>> {
    let held: Vec<&VoxelConsensus> = voxels.iter().zip(holdout).filter(|(_, &h)| h).map(|(v, _)| v).collect();
    let modalities = bundle.modalities();
    let (mg, mu) = if held.is_empty() {
        (BTreeMap::new(), BTreeMap::new())
    } else {
        (consistency_mad(guided, &held, &modalities)?, consistency_mad(unguided, &held, &modalities)?)
    };
    modalities
        .iter()
        .map(|&m| {
            Ok(ModalityRun {
                modality: m,
                mad_guided: mg.get(&m).copied().unwrap_or(f64::NAN),
                mad_unguided: mu.get(&m).copied().unwrap_or(f64::NAN),
                guided: mean_quality(bundle, guided, m)?,
                unguided: mean_quality(bundle, unguided, m)?,
            })
        })
        .collect()
}

/// Checks that no held-out voxel contributes a guidance target.
pub fn check_holdout_isolation(output: &PipelineOutput) -> Result<()> {
    let held: BTreeSet<usize> = output.consensus.holdout_indices().collect();
    for t in &output.targets {
        if let Some(e) = t.guide_entries().find(|e| held.contains(&e.voxel)) {
            return Err(Error::InvalidArgument(format!(
                "held-out voxel {} guides view {} ({})",
                e.voxel, t.view, t.modality
            )));
        }
    }
    Ok(())
}

/// Pipeline plus scoring for one view subset.
pub fn evaluate_run(subset: &SceneBundle, views: Vec<usize>, seed: u64, config: &PipelineConfig) -> Result<RunRecord> {
    let cfg = PipelineConfig { seed, ..config.clone() };
    let out = run_pipeline(subset, &cfg)?;
    check_holdout_isolation(&out)?;
    Ok(RunRecord {
        view_count: subset.views.len(),
        seed,
        views,
        holdout_voxels: out.consensus.holdout_indices().count(),
        degenerate: out.is_degenerate(),
        modalities: evaluate_predictions(subset, &out.consensus.voxels, &out.consensus.holdout, &out.guided, &out.unguided)?,
    })
}

/// Seed of run `k` at view count `v`.
pub fn run_seed(base: u64, view_count: usize, k: usize) -> u64 {
    derive_seed(base, ((view_count as u64) << 32) | k as u64)
}

/// For every view count, `num_seeds` random view subsets, each run through
/// the pipeline and scored. Runs execute in parallel; reports come back in
/// the order of `view_counts` with runs in seed order.
pub fn run_experiment(
    bundle: &SceneBundle,
    view_counts: &[usize],
    num_seeds: usize,
    config: &PipelineConfig,
) -> Result<Vec<EvalReport>> {
    config.validate()?;
    if num_seeds == 0 {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    if let Some(&v) = view_counts.iter().find(|&&v| v == 0 || v > bundle.views.len()) {
        return Err(Error::InvalidArgument(format!(
            "view count {v} not available in a bundle of {}",
            bundle.views.len()
        )));
    }
    let jobs: Vec<(usize, usize)> = view_counts.iter().flat_map(|&v| (0..num_seeds).map(move |k| (v, k))).collect();
    let records = jobs
        .par_iter()
        .map(|&(v, k)| {
            let seed = run_seed(config.seed, v, k);
            let views = choose_views(bundle.views.len(), v, seed)?;
            let subset = subsample_views(bundle, v, seed)?;
            evaluate_run(&subset, views, seed, config)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = records.into_iter();
    view_counts
        .iter()
        .map(|&v| EvalReport::from_runs(v, config, it.by_ref().take(num_seeds).collect()))
        .collect()
}
