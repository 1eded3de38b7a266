//! Robust per-voxel aggregation of the initial predictions and projection
//! of the consensus back into each view as sparse guidance targets.

use std::collections::BTreeMap;

use nalgebra::Point3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{distinct_views, visible_pixel, CellIndex, Observation, VoxelGrid};
use crate::raster::Raster;
use crate::rng::{rng_for, streams};
use crate::scene::{sample_indices, Modality, SceneBundle};
use crate::stats::median;

/// Consistency constant of the MAD for Gaussian data, `1 / Phi^-1(3/4)`.
pub const MAD_SCALE: f64 = 1.4826;

/// Floor added to the dispersion before inversion in target weights.
pub const DISPERSION_FLOOR: f64 = 1e-4;

/// Lower weighted median: the smallest value whose cumulative weight
/// reaches half of the total. Always one of `values`.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("weighted median of no values"));
    }
    if values.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} values but {} weights",
            values.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument(format!("weights must be positive and finite, got {w}")));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for &i in &order {
        acc += weights[i];
        if 2.0 * acc >= total {
            return Ok(values[i]);
        }
    }
    Ok(values[*order.last().expect("non-empty")])
}

/// Consensus of one modality inside one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityConsensus {
    pub modality: Modality,
    /// Channel-wise weighted median `s_v`.
    pub value: Vec<f64>,
    /// `1.4826 * median |y_j - s_v|` over all observations, where the
    /// residual of a multi-channel sample is its channel-mean magnitude.
    pub sigma_hat: f64,
    /// Indices into the voxel's observations that survive outlier rejection.
    pub inliers: Vec<usize>,
    /// Dispersion recomputed over the inliers; feeds the target weight.
    pub inlier_sigma_hat: f64,
    /// Distinct views among the inliers.
    pub inlier_views: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelConsensus {
    pub cell: CellIndex,
    pub center: Point3<f64>,
    pub n_views: usize,
    pub observations: Vec<Observation>,
    pub modalities: Vec<ModalityConsensus>,
}

impl VoxelConsensus {
    pub fn modality(&self, m: Modality) -> Option<&ModalityConsensus> {
        self.modalities.iter().find(|c| c.modality == m)
    }
}

/// Aggregates per-observation samples `samples[j][c]` with weights
/// `weights[j]`. `views[j]` is the originating view of sample `j`.
pub fn aggregate(
    modality: Modality,
    samples: &[Vec<f64>],
    weights: &[f64],
    views: &[usize],
    k_out: f64,
) -> Result<ModalityConsensus> {
    if samples.is_empty() {
        return Err(Error::Empty("consensus of a voxel without observations"));
    }
    let channels = samples[0].len();
    let value = (0..channels)
        .map(|c| {
            let column: Vec<f64> = samples.iter().map(|s| s[c]).collect();
            weighted_median(&column, weights)
        })
        .collect::<Result<Vec<f64>>>()?;
    let residuals: Vec<f64> = samples
        .iter()
        .map(|s| s.iter().zip(&value).map(|(y, v)| (y - v).abs()).sum::<f64>() / channels as f64)
        .collect();
    let sigma_hat = MAD_SCALE * median(&mut residuals.clone());
    let inliers: Vec<usize> = if sigma_hat < DISPERSION_FLOOR {
        (0..samples.len()).collect()
    } else {
        (0..samples.len()).filter(|&j| residuals[j] <= k_out * sigma_hat).collect()
    };
    let mut kept: Vec<f64> = inliers.iter().map(|&j| residuals[j]).collect();
    let inlier_sigma_hat = MAD_SCALE * median(&mut kept);
    let mut inlier_view_ids: Vec<usize> = inliers.iter().map(|&j| views[j]).collect();
    inlier_view_ids.sort_unstable();
    inlier_view_ids.dedup();
    Ok(ModalityConsensus {
        modality,
        value,
        sigma_hat,
        inliers,
        inlier_sigma_hat,
        inlier_views: inlier_view_ids.len(),
    })
}

/// Per-voxel consensus for every modality predicted by `bundle`, in cell
/// order. Sample weights are the observation confidences.
pub fn compute_consensus(grid: &VoxelGrid, bundle: &SceneBundle, k_out: f64) -> Result<Vec<VoxelConsensus>> {
    let modalities = bundle.modalities();
    let cells: Vec<(&CellIndex, &Vec<Observation>)> = grid.cells.iter().collect();
    cells
        .par_iter()
        .map(|(cell, obs)| {
            if obs.is_empty() {
                return Err(Error::Empty("voxel without observations"));
            }
            let weights: Vec<f64> = obs.iter().map(|o| o.confidence).collect();
            let views: Vec<usize> = obs.iter().map(|o| o.view).collect();
            let mut per_modality = Vec::with_capacity(modalities.len());
            for &m in &modalities {
                let samples = obs
                    .iter()
                    .map(|o| {
                        let map = bundle.views[o.view].prediction(m).ok_or_else(|| {
                            Error::InvalidBundle(format!("view {} lacks a {m} prediction", o.view))
                        })?;
                        Ok(map.pixel(o.row, o.col).iter().map(|&v| f64::from(v)).collect())
                    })
                    .collect::<Result<Vec<Vec<f64>>>>()?;
                per_modality.push(aggregate(m, &samples, &weights, &views, k_out)?);
            }
            Ok(VoxelConsensus {
                cell: **cell,
                center: grid.center(cell),
                n_views: distinct_views(obs),
                observations: obs.to_vec(),
                modalities: per_modality,
            })
        })
        .collect()
}

/// Unnormalised target weight: view-count support damped by `log2`, times
/// the inverse dispersion.
pub fn compute_target_weight(n_views: usize, sigma_hat: f64) -> f64 {
    (1.0 + n_views as f64).log2() / (sigma_hat + DISPERSION_FLOOR)
}

/// Scales `weights` so their mean is one. No-op on an empty slice.
pub fn normalize_weights(weights: &mut [f64]) {
    if weights.is_empty() {
        return;
    }
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    if mean > 0.0 {
        for w in weights {
            *w /= mean;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetEntry {
    pub row: usize,
    pub col: usize,
    /// Index of the source voxel in the consensus list.
    pub voxel: usize,
    pub value: Vec<f64>,
    pub weight: f64,
    pub holdout: bool,
}

/// Sparse consensus targets of one modality in one view, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTargets {
    pub view: usize,
    pub modality: Modality,
    pub entries: Vec<TargetEntry>,
}

impl ViewTargets {
    pub fn empty(view: usize, modality: Modality) -> Self {
        Self {
            view,
            modality,
            entries: Vec::new(),
        }
    }

    /// Entries that drive guidance.
    pub fn guide_entries(&self) -> impl Iterator<Item = &TargetEntry> {
        self.entries.iter().filter(|e| !e.holdout)
    }

    pub fn guide_count(&self) -> usize {
        self.guide_entries().count()
    }

    /// Debug rendering: consensus value channels, then weight, then the
    /// held-out flag. Pixels without a target are zero.
    pub fn to_raster(&self, height: usize, width: usize) -> Raster<f32> {
        let c = self.modality.channels();
        let mut r = Raster::filled(height, width, c + 2, 0.0f32);
        for e in &self.entries {
            let px = r.pixel_mut(e.row, e.col);
            for (dst, v) in px.iter_mut().zip(&e.value) {
                *dst = *v as f32;
            }
            px[c] = e.weight as f32;
            px[c + 1] = if e.holdout { 1.0 } else { 0.0 };
        }
        r
    }
}

/// Pixel-collision order: larger weight wins, ties go to the lower voxel
/// index.
fn better(a: &TargetEntry, b: &TargetEntry) -> bool {
    a.weight > b.weight || (a.weight == b.weight && a.voxel < b.voxel)
}

/// Projects every voxel centre into every view and keeps the visible ones
/// as targets, one per pixel. Weights are normalised per view and
/// modality to mean one.
///
/// Returns one [`ViewTargets`] per `(view, modality)`, view-major.
pub fn build_view_targets(
    consensus: &[VoxelConsensus],
    holdout: &[bool],
    bundle: &SceneBundle,
    eps_vis: f64,
) -> Result<Vec<ViewTargets>> {
    if holdout.len() != consensus.len() {
        return Err(Error::ShapeMismatch(format!(
            "holdout mask has {} entries for {} voxels",
            holdout.len(),
            consensus.len()
        )));
    }
    let modalities = bundle.modalities();
    let per_view: Vec<Vec<ViewTargets>> = bundle
        .views
        .par_iter()
        .enumerate()
        .map(|(vi, view)| {
            let visible: Vec<(usize, (usize, usize))> = consensus
                .iter()
                .enumerate()
                .filter_map(|(k, vox)| visible_pixel(&vox.center, view, eps_vis).map(|px| (k, px)))
                .collect();
            modalities
                .iter()
                .map(|&m| {
                    let mut best: BTreeMap<(usize, usize), TargetEntry> = BTreeMap::new();
                    for &(k, (row, col)) in &visible {
                        let Some(mc) = consensus[k].modality(m) else { continue };
                        let entry = TargetEntry {
                            row,
                            col,
                            voxel: k,
                            value: mc.value.clone(),
                            weight: compute_target_weight(mc.inlier_views, mc.inlier_sigma_hat),
                            holdout: holdout[k],
                        };
                        match best.get(&(row, col)) {
                            Some(cur) if !better(&entry, cur) => {}
                            _ => {
                                best.insert((row, col), entry);
                            }
                        }
                    }
                    let mut entries: Vec<TargetEntry> = best.into_values().collect();
                    let mut weights: Vec<f64> = entries.iter().map(|e| e.weight).collect();
                    normalize_weights(&mut weights);
                    for (e, w) in entries.iter_mut().zip(weights) {
                        e.weight = w;
                    }
                    ViewTargets {
                        view: vi,
                        modality: m,
                        entries,
                    }
                })
                .collect()
        })
        .collect();
    Ok(per_view.into_iter().flatten().collect())
}

/// Seeded partition of `n` voxels; `true` marks held-out voxels. Exactly
/// `round(fraction * n)` are held out.
pub fn split_holdout(n: usize, fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("holdout fraction must lie in (0, 1), got {fraction}")));
    }
    let count = (fraction * n as f64).round() as usize;
    let mut rng = rng_for(seed, streams::HOLDOUT);
    let mut mask = vec![false; n];
    for i in sample_indices(n, count, &mut rng) {
        mask[i] = true;
    }
    Ok(mask)
}
