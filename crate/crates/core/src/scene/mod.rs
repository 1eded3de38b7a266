//! Scene bundles: per-view cameras, point maps, depths, confidences and
//! intrinsic predictions.
//!
//! All 3D quantities live in the frame of the first camera of the bundle
//! as it was produced. Subsampling keeps that frame even when view 0 is
//! dropped, so consensus geometry is comparable across subsets.

mod format;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::{rng_for, streams};

pub use format::{load_bundle, read_array, save_bundle, write_array, ARRAY_MAGIC, ARRAY_VERSION};

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Pinhole camera. `extrinsics` maps world coordinates to camera
/// coordinates (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: Matrix3<f64>,
    pub extrinsics: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(intrinsics: Matrix3<f64>, extrinsics: Matrix4<f64>, width: usize, height: usize) -> Self {
        Self {
            intrinsics,
            extrinsics,
            width,
            height,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsics.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsics.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation() * p.coords + self.translation())
    }

    pub fn camera_to_world(&self, q: &Point3<f64>) -> Point3<f64> {
        let r = self.rotation();
        Point3::from(r.transpose() * (q.coords - self.translation()))
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        self.camera_to_world(&Point3::origin())
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let k = &self.intrinsics;
        let e = &self.extrinsics;
        if self.width == 0 || self.height == 0 {
            return Err("image size must be positive".into());
        }
        if k.iter().chain(e.iter()).any(|v| !v.is_finite()) {
            return Err("non-finite matrix entry".into());
        }
        if k[(2, 2)] != 1.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(format!("intrinsics bottom row must be (0,0,1), got {}", k.row(2)));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err("focal lengths must be positive".into());
        }
        if e[(3, 0)] != 0.0 || e[(3, 1)] != 0.0 || e[(3, 2)] != 0.0 || e[(3, 3)] != 1.0 {
            return Err(format!("extrinsics bottom row must be (0,0,0,1), got {}", e.row(3)));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(format!("rotation block not orthonormal (max error {err:.3e})"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Albedo,
    Roughness,
    Metallicity,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Albedo, Modality::Roughness, Modality::Metallicity];

    pub fn channels(self) -> usize {
        match self {
            Modality::Albedo => 3,
            Modality::Roughness | Modality::Metallicity => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Albedo => "albedo",
            Modality::Roughness => "roughness",
            Modality::Metallicity => "metallicity",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "albedo" => Ok(Modality::Albedo),
            "roughness" => Ok(Modality::Roughness),
            "metallicity" => Ok(Modality::Metallicity),
            other => Err(Error::InvalidArgument(format!("unknown modality `{other}`"))),
        }
    }
}

/// A per-view material map in linear RGB, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicMap {
    modality: Modality,
    data: Raster<f32>,
}

impl IntrinsicMap {
    /// Strict constructor: rejects non-finite or out-of-range values.
    pub fn new(modality: Modality, data: Raster<f32>) -> Result<Self> {
        check_channels(modality, &data)?;
        if let Some(bad) = data.data().iter().find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "{modality} value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { modality, data })
    }

    /// Ingestion constructor for values produced outside this crate:
    /// clamps into `[0, 1]`. Non-finite values are still rejected.
    pub fn clamped(modality: Modality, data: Raster<f32>) -> Result<Self> {
        check_channels(modality, &data)?;
        if data.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{modality} map has non-finite values")));
        }
        Ok(Self {
            modality,
            data: data.map(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn from_f64_clamped(modality: Modality, data: &Raster<f64>) -> Result<Self> {
        Self::clamped(modality, data.map(|v| v.clamp(0.0, 1.0) as f32))
    }

    pub fn constant(modality: Modality, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(modality, Raster::filled(height, width, modality.channels(), value))
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn raster(&self) -> &Raster<f32> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.height()
    }

    pub fn width(&self) -> usize {
        self.data.width()
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        self.data.pixel(row, col)
    }
}

fn check_channels(modality: Modality, data: &Raster<f32>) -> Result<()> {
    if data.channels() != modality.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{modality} needs {} channels, got {}",
            modality.channels(),
            data.channels()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewFrame {
    pub camera: Camera,
    /// World-frame point per pixel, `H x W x 3`.
    pub points: Raster<f32>,
    /// Camera-frame z depth per pixel.
    pub depth: Raster<f32>,
    /// Point confidence in `[0, 1]`.
    pub confidence: Raster<f32>,
    /// Depth confidence. Carried through I/O but not consumed by the pipeline.
    pub depth_confidence: Option<Raster<f32>>,
    pub predictions: BTreeMap<Modality, IntrinsicMap>,
    pub gt: BTreeMap<Modality, IntrinsicMap>,
    pub rgb: Option<Raster<f32>>,
}

impl ViewFrame {
    pub fn height(&self) -> usize {
        self.camera.height
    }

    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn point(&self, row: usize, col: usize) -> Point3<f64> {
        let p = self.points.pixel(row, col);
        Point3::new(f64::from(p[0]), f64::from(p[1]), f64::from(p[2]))
    }

    pub fn depth_at(&self, row: usize, col: usize) -> f64 {
        f64::from(self.depth.get(row, col, 0))
    }

    pub fn confidence_at(&self, row: usize, col: usize) -> f64 {
        f64::from(self.confidence.get(row, col, 0))
    }

    pub fn prediction(&self, modality: Modality) -> Option<&IntrinsicMap> {
        self.predictions.get(&modality)
    }

    /// Checks every invariant of a single view, tagging failures with
    /// `index` and the offending array name.
    pub fn validate(&self, index: usize) -> Result<()> {
        self.camera
            .validate()
            .map_err(|reason| Error::InvalidCamera { view: index, reason })?;
        let (h, w) = (self.camera.height, self.camera.width);
        check_array(index, "points", &self.points, h, w, 3)?;
        check_array(index, "depth", &self.depth, h, w, 1)?;
        check_array(index, "confidence", &self.confidence, h, w, 1)?;
        check_unit_range(index, "confidence", &self.confidence)?;
        if let Some(dc) = &self.depth_confidence {
            check_array(index, "depth_confidence", dc, h, w, 1)?;
        }
        if let Some(rgb) = &self.rgb {
            check_array(index, "rgb", rgb, h, w, 3)?;
        }
        for (row, col) in pixels(h, w) {
            if self.confidence.get(row, col, 0) > 0.0 && self.depth.get(row, col, 0) <= 0.0 {
                return Err(Error::invalid_array(
                    index,
                    "depth",
                    format!("non-positive depth at confident pixel ({row}, {col})"),
                ));
            }
        }
        for (kind, maps) in [("prediction", &self.predictions), ("gt", &self.gt)] {
            for (modality, map) in maps {
                let name = format!("{kind}/{modality}");
                if map.modality() != *modality {
                    return Err(Error::invalid_array(index, name, "modality tag mismatch"));
                }
                check_array(index, &name, map.raster(), h, w, modality.channels())?;
                check_unit_range(index, &name, map.raster())?;
            }
        }
        Ok(())
    }
}

fn check_array(view: usize, name: &str, a: &Raster<f32>, h: usize, w: usize, c: usize) -> Result<()> {
    if a.shape() != (h, w, c) {
        return Err(Error::invalid_array(
            view,
            name,
            format!("expected shape {h}x{w}x{c}, got {}x{}x{}", a.height(), a.width(), a.channels()),
        ));
    }
    if let Some(i) = a.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid_array(view, name, format!("non-finite value at element {i}")));
    }
    Ok(())
}

fn check_unit_range(view: usize, name: &str, a: &Raster<f32>) -> Result<()> {
    if let Some(v) = a.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid_array(view, name, format!("value {v} outside [0, 1]")));
    }
    Ok(())
}

pub(crate) fn pixels(height: usize, width: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..height).flat_map(move |r| (0..width).map(move |c| (r, c)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub scene_id: String,
    pub seed: u64,
    pub views: Vec<ViewFrame>,
}

impl SceneBundle {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::InvalidBundle("bundle has no views".into()));
        }
        let modalities = self.views[0].predictions.keys().copied().collect::<Vec<_>>();
        for (i, view) in self.views.iter().enumerate() {
            view.validate(i)?;
            let these = view.predictions.keys().copied().collect::<Vec<_>>();
            if these != modalities {
                return Err(Error::InvalidBundle(format!(
                    "view {i} predicts {these:?} but view 0 predicts {modalities:?}"
                )));
            }
        }
        Ok(())
    }

    /// Modalities predicted by every view.
    pub fn modalities(&self) -> Vec<Modality> {
        self.views
            .first()
            .map(|v| v.predictions.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn has_gt(&self) -> bool {
        !self.views.is_empty() && self.views.iter().all(|v| !v.gt.is_empty())
    }
}

/// Indices of a uniform `count`-subset of `0..n` drawn by partial
/// Fisher-Yates, returned in increasing order.
pub fn sample_indices(n: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count.min(n) {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut chosen = idx[..count.min(n)].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Indices of the views [`subsample_views`] keeps for `(count, seed)`.
pub fn choose_views(n: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 || count > n {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {count} views from a bundle of {n}"
        )));
    }
    let mut rng = rng_for(seed, streams::SUBSET);
    Ok(sample_indices(n, count, &mut rng))
}

/// Keeps `count` views drawn uniformly without replacement; relative order
/// and the world frame are preserved.
pub fn subsample_views(bundle: &SceneBundle, count: usize, seed: u64) -> Result<SceneBundle> {
    let chosen = choose_views(bundle.views.len(), count, seed)?;
    Ok(SceneBundle {
        scene_id: bundle.scene_id.clone(),
        seed: bundle.seed,
        views: chosen.iter().map(|&i| bundle.views[i].clone()).collect(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_view(h: usize, w: usize) -> ViewFrame {
        let k = Matrix3::new(10.0, 0.0, (w as f64 - 1.0) / 2.0, 0.0, 10.0, (h as f64 - 1.0) / 2.0, 0.0, 0.0, 1.0);
        let camera = Camera::new(k, Matrix4::identity(), w, h);
        let mut predictions = BTreeMap::new();
        predictions.insert(
            Modality::Roughness,
            IntrinsicMap::constant(Modality::Roughness, h, w, 0.5).unwrap(),
        );
        ViewFrame {
            camera,
            points: Raster::filled(h, w, 3, 1.0),
            depth: Raster::filled(h, w, 1, 1.0),
            confidence: Raster::filled(h, w, 1, 1.0),
            depth_confidence: None,
            predictions,
            gt: BTreeMap::new(),
            rgb: None,
        }
    }

    fn bundle_of(n: usize) -> SceneBundle {
        SceneBundle {
            scene_id: "t".into(),
            seed: 0,
            views: (0..n)
                .map(|i| {
                    let mut v = tiny_view(2, 2);
                    v.depth = Raster::filled(2, 2, 1, 1.0 + i as f32);
                    v
                })
                .collect(),
        }
    }

    #[test]
    fn minimal_bundle_validates() {
        let b = bundle_of(1);
        b.validate().unwrap();
        assert_eq!(b.views.len(), 1);
    }

    #[test]
    fn nan_depth_is_reported_with_view_and_array() {
        let mut b = bundle_of(3);
        b.views[2].depth.data_mut()[1] = f32::NAN;
        let err = b.validate().unwrap_err();
        match err {
            Error::InvalidArray { view, ref array, .. } => {
                assert_eq!(view, 2);
                assert_eq!(array, "depth");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn out_of_range_confidence_rejected() {
        let mut b = bundle_of(1);
        b.views[0].confidence.data_mut()[0] = 1.5;
        assert!(matches!(b.validate(), Err(Error::InvalidArray { ref array, .. }) if array == "confidence"));
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let mut b = bundle_of(1);
        b.views[0].camera.extrinsics[(0, 0)] = 1.1;
        assert!(matches!(b.validate(), Err(Error::InvalidCamera { view: 0, .. })));
    }

    #[test]
    fn intrinsic_map_strict_vs_clamped() {
        let r = Raster::new(1, 2, 1, vec![-0.25f32, 1.5]).unwrap();
        assert!(IntrinsicMap::new(Modality::Roughness, r.clone()).is_err());
        let m = IntrinsicMap::clamped(Modality::Roughness, r).unwrap();
        assert_eq!(m.raster().data(), &[0.0, 1.0]);
        let wrong = Raster::filled(1, 1, 1, 0.5f32);
        assert!(IntrinsicMap::new(Modality::Albedo, wrong).is_err());
    }

    #[test]
    fn subsample_full_count_is_identity() {
        let b = bundle_of(5);
        let s = subsample_views(&b, 5, 3).unwrap();
        assert_eq!(s, b);
    }

    #[test]
    fn subsample_is_deterministic_and_ordered() {
        let b = bundle_of(12);
        let a = subsample_views(&b, 4, 99).unwrap();
        let c = subsample_views(&b, 4, 99).unwrap();
        assert_eq!(a, c);
        let depths: Vec<f32> = a.views.iter().map(|v| v.depth.get(0, 0, 0)).collect();
        assert!(depths.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn subsample_rejects_bad_counts() {
        let b = bundle_of(3);
        assert!(subsample_views(&b, 0, 1).is_err());
        assert!(subsample_views(&b, 4, 1).is_err());
    }

    #[test]
    fn modality_round_trips_through_str() {
        for m in Modality::ALL {
            assert_eq!(m.name().parse::<Modality>().unwrap(), m);
        }
        assert!("emission".parse::<Modality>().is_err());
    }
}
