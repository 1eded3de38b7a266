use std::collections::BTreeMap;

use nalgebra::Point3;
use rayon::prelude::*;

use super::{guided_sample, unguided_sample, Denoiser, GuidanceState, ToyDenoiser};
use crate::config::PipelineConfig;
use crate::consensus::{build_view_targets, compute_consensus, split_holdout, ViewTargets, VoxelConsensus};
use crate::error::{Error, Result};
use crate::geometry::{filter_points, median_nn_distance_sampled, prune_cells, voxelize, NN_SAMPLE_LIMIT};
use crate::rng::{derive_seed, streams};
use crate::scene::{IntrinsicMap, Modality, SceneBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineWarning {
    /// Fewer than two points passed the confidence filter.
    TooFewPoints,
    /// No voxel was seen by enough views; outputs are unguided.
    EmptyConsensus,
}

/// Consensus voxels with their holdout assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusSet {
    pub origin: Point3<f64>,
    pub delta: f64,
    /// Median nearest-neighbour spacing the voxel size was derived from.
    pub spacing: f64,
    pub voxels: Vec<VoxelConsensus>,
    pub holdout: Vec<bool>,
}

impl ConsensusSet {
    fn empty() -> Self {
        Self { origin: Point3::origin(), delta: 0.0, spacing: 0.0, voxels: Vec::new(), holdout: Vec::new() }
    }

    pub fn holdout_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.holdout.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub unguided: Vec<BTreeMap<Modality, IntrinsicMap>>,
    pub guided: Vec<BTreeMap<Modality, IntrinsicMap>>,
    pub consensus: ConsensusSet,
    /// One entry per `(view, modality)`, view-major.
    pub targets: Vec<ViewTargets>,
    /// Same order as `targets`.
    pub states: Vec<GuidanceState>,
    pub warnings: Vec<PipelineWarning>,
}

impl PipelineOutput {
    pub fn is_degenerate(&self) -> bool {
        self.warnings.contains(&PipelineWarning::EmptyConsensus)
    }

    /// The bundle with its predictions replaced by the guided outputs.
    pub fn guided_bundle(&self, bundle: &SceneBundle) -> SceneBundle {
        with_predictions(bundle, &self.guided)
    }

    pub fn unguided_bundle(&self, bundle: &SceneBundle) -> SceneBundle {
        with_predictions(bundle, &self.unguided)
    }
}

fn with_predictions(bundle: &SceneBundle, preds: &[BTreeMap<Modality, IntrinsicMap>]) -> SceneBundle {
    let mut out = bundle.clone();
    for (v, p) in out.views.iter_mut().zip(preds) {
        v.predictions = p.clone();
    }
    out
}

/// Seed of the sampling trajectory for one `(view, modality)` pair.
pub fn trajectory_seed(base: u64, view: usize, modality: Modality) -> u64 {
    let m = Modality::ALL.iter().position(|&x| x == modality).unwrap_or(0) as u64;
    derive_seed(base, streams::TRAJECTORY + (view as u64) * 8 + m)
}

/// Full pipeline with the bundled toy denoiser wrapped around each
/// supplied prediction.
pub fn run_pipeline(bundle: &SceneBundle, config: &PipelineConfig) -> Result<PipelineOutput> {
    run_pipeline_with(bundle, config, |_, map| {
        ToyDenoiser::new(map.raster().to_f64(), config.num_steps, &config.toy)
    })
}

/// Full pipeline with a caller-supplied denoiser per `(view, prediction)`.
pub fn run_pipeline_with<D, F>(bundle: &SceneBundle, config: &PipelineConfig, make_denoiser: F) -> Result<PipelineOutput>
where
    D: Denoiser,
    F: Fn(usize, &IntrinsicMap) -> Result<D> + Sync,
{
    config.validate()?;
    bundle.validate()?;
    let modalities = bundle.modalities();
    let pairs: Vec<(usize, Modality)> = (0..bundle.views.len())
        .flat_map(|v| modalities.iter().map(move |&m| (v, m)))
        .collect();

    let denoisers = pairs
        .par_iter()
        .map(|&(v, m)| {
            let map = bundle.views[v]
                .prediction(m)
                .ok_or_else(|| Error::InvalidBundle(format!("view {v} lacks a {m} prediction")))?;
            make_denoiser(v, map)
        })
        .collect::<Result<Vec<D>>>()?;

    let initial = pairs
        .par_iter()
        .zip(&denoisers)
        .map(|(&(v, m), d)| {
            if d.num_steps() != config.num_steps {
                return Err(Error::Denoiser(format!(
                    "denoiser for view {v} runs {} steps, config asks for {}",
                    d.num_steps(),
                    config.num_steps
                )));
            }
            let out = unguided_sample(d, trajectory_seed(config.seed, v, m))?;
            IntrinsicMap::from_f64_clamped(m, &out)
        })
        .collect::<Result<Vec<_>>>()?;
    let unguided = regroup(bundle.views.len(), &pairs, initial);
    let initial_bundle = with_predictions(bundle, &unguided);

    let (consensus, warnings) = consensus_stage(&initial_bundle, config)?;

    let targets = if consensus.voxels.is_empty() {
        pairs.iter().map(|&(v, m)| ViewTargets::empty(v, m)).collect()
    } else {
        build_view_targets(&consensus.voxels, &consensus.holdout, &initial_bundle, config.eps_vis)?
    };
    debug_assert!(targets.iter().zip(&pairs).all(|(t, &(v, m))| t.view == v && t.modality == m));

    let results = pairs
        .par_iter()
        .zip(&denoisers)
        .zip(&targets)
        .map(|((&(v, m), d), t)| guided_sample(d, t, config, trajectory_seed(config.seed, v, m)))
        .collect::<Result<Vec<_>>>()?;
    let (guided, states): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let guided = regroup(bundle.views.len(), &pairs, guided);

    Ok(PipelineOutput { unguided, guided, consensus, targets, states, warnings })
}

/// Filter, voxelise, prune, aggregate and split, using the predictions
/// already stored in `bundle`.
pub fn consensus_stage(bundle: &SceneBundle, config: &PipelineConfig) -> Result<(ConsensusSet, Vec<PipelineWarning>)> {
    let mut warnings = Vec::new();
    let consensus = build_consensus(bundle, config, &mut warnings)?;
    if consensus.voxels.is_empty() {
        warnings.push(PipelineWarning::EmptyConsensus);
        log::warn!("no voxel survived the view-count filter");
    }
    Ok((consensus, warnings))
}

fn build_consensus(
    bundle: &SceneBundle,
    config: &PipelineConfig,
    warnings: &mut Vec<PipelineWarning>,
) -> Result<ConsensusSet> {
    let observations = filter_points(bundle, config.tau_c);
    if observations.len() < 2 {
        warnings.push(PipelineWarning::TooFewPoints);
        return Ok(ConsensusSet::empty());
    }
    let points: Vec<_> = observations.iter().map(|o| o.point).collect();
    let spacing = median_nn_distance_sampled(&points, NN_SAMPLE_LIMIT, config.seed)?;
    if spacing <= 0.0 {
        return Err(Error::InvalidBundle(
            "median nearest-neighbour distance is zero; point maps are degenerate".into(),
        ));
    }
    let delta = config.alpha * spacing;
    let grid = prune_cells(&voxelize(&observations, delta)?, config.n_min);
    log::debug!(
        "{} observations, spacing {spacing:.5}, voxel {delta:.5}, {} voxels kept",
        observations.len(),
        grid.len()
    );
    let voxels = compute_consensus(&grid, bundle, config.k_out)?;
    let holdout = if voxels.is_empty() {
        Vec::new()
    } else {
        split_holdout(voxels.len(), config.holdout_fraction, config.seed)?
    };
    Ok(ConsensusSet { origin: grid.origin, delta, spacing, voxels, holdout })
}

fn regroup(
    views: usize,
    pairs: &[(usize, Modality)],
    maps: Vec<IntrinsicMap>,
) -> Vec<BTreeMap<Modality, IntrinsicMap>> {
    let mut out = vec![BTreeMap::new(); views];
    for (&(v, m), map) in pairs.iter().zip(maps) {
        out[v].insert(m, map);
    }
    out
}
