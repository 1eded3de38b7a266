//! Synthetic scenes with exact geometry and ground-truth materials, and a
//! statistical model of view-dependent prediction errors.

mod corrupt;

pub use corrupt::{
    apply_view_corruption, corrupt_predictions, draw_view_corruption, CorruptionConfig, CosineMode,
    LowConfidencePixel, MapCorruption, OutlierPatch, ViewCorruption,
};

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::{rng_for, streams};
use crate::scene::{Camera, IntrinsicMap, Modality, SceneBundle, ViewFrame};

/// Confidence assigned to points on the room walls.
pub const BACKGROUND_CONFIDENCE: f32 = 0.9;
const MIN_IMAGE_SIDE: usize = 16;
const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checker {
    /// Cell edge length in world units.
    pub size: f64,
    #[serde(default)]
    pub origin: [f64; 3],
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
    /// Alternate material on odd cells of a 3D checkerboard.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checker: Option<Checker>,
}

impl Material {
    pub const fn plain(albedo: [f64; 3], roughness: f64, metallic: f64) -> Self {
        Self { albedo, roughness, metallic, checker: None }
    }

    /// `(albedo, roughness, metallic)` at a world point.
    pub fn at(&self, p: &Point3<f64>) -> ([f64; 3], f64, f64) {
        if let Some(c) = &self.checker {
            let parity: i64 = (0..3).map(|i| ((p[i] - c.origin[i]) / c.size).floor() as i64).sum();
            if parity.rem_euclid(2) == 1 {
                return (c.albedo, c.roughness, c.metallic);
            }
        }
        (self.albedo, self.roughness, self.metallic)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let mut vals: Vec<f64> = self.albedo.to_vec();
        vals.extend([self.roughness, self.metallic]);
        if let Some(c) = &self.checker {
            if !(c.size > 0.0) {
                return Err("checker size must be positive".into());
            }
            vals.extend(c.albedo);
            vals.extend([c.roughness, c.metallic]);
        }
        match vals.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            Some(v) => Err(format!("material value {v} outside [0, 1]")),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    /// Axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3], material: Material },
    /// Parallelogram `origin + a*u + b*v`, `a, b in [0, 1]`, visible from
    /// both sides.
    Plane { origin: [f64; 3], u: [f64; 3], v: [f64; 3], material: Material },
}

impl Primitive {
    pub fn material(&self) -> &Material {
        match self {
            Primitive::Box { material, .. } | Primitive::Plane { material, .. } => material,
        }
    }

    fn bounds(&self) -> (Point3<f64>, Point3<f64>) {
        match self {
            Primitive::Box { min, max, .. } => (Point3::from(*min), Point3::from(*max)),
            Primitive::Plane { origin, u, v, .. } => {
                let o = Vector3::from(*origin);
                let (u, v) = (Vector3::from(*u), Vector3::from(*v));
                let corners = [o, o + u, o + v, o + u + v];
                let lo = corners.iter().fold(Vector3::repeat(f64::INFINITY), |m, c| m.inf(c));
                let hi = corners.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |m, c| m.sup(c));
                (Point3::from(lo), Point3::from(hi))
            }
        }
    }

    /// Nearest hit with `t > HIT_EPS` and the face it lands on (box faces
    /// are `2 * axis + (0 for the min side, 1 for the max side)`).
    fn intersect(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
        match self {
            Primitive::Box { min, max, .. } => {
                let (t_near, axis, _, _) = slab(o, d, min, max)?;
                if t_near <= HIT_EPS {
                    return None;
                }
                let face = 2 * axis + usize::from(d[axis] < 0.0);
                Some((t_near, face))
            }
            Primitive::Plane { origin, u, v, .. } => {
                let (u, v) = (Vector3::from(*u), Vector3::from(*v));
                let n = u.cross(&v);
                let denom = n.dot(d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = n.dot(&(Point3::from(*origin) - o)) / denom;
                if t <= HIT_EPS {
                    return None;
                }
                let rel = o + d * t - Point3::from(*origin);
                let a = rel.dot(&u) / u.norm_squared();
                let b = rel.dot(&v) / v.norm_squared();
                ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some((t, 0))
            }
        }
    }
}

/// Slab test: `(t_near, near_axis, t_far, far_axis)` when the ray line
/// meets the box with `t_far > 0`.
fn slab(o: &Point3<f64>, d: &Vector3<f64>, min: &[f64; 3], max: &[f64; 3]) -> Option<(f64, usize, f64, usize)> {
    let (mut t0, mut a0, mut t1, mut a1) = (f64::NEG_INFINITY, 0, f64::INFINITY, 0);
    for i in 0..3 {
        if d[i] == 0.0 {
            if o[i] < min[i] || o[i] > max[i] {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((min[i] - o[i]) / d[i], (max[i] - o[i]) / d[i]);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        if lo > t0 {
            t0 = lo;
            a0 = i;
        }
        if hi < t1 {
            t1 = hi;
            a1 = i;
        }
    }
    (t0 <= t1 && t1 > HIT_EPS).then_some((t0, a0, t1, a1))
}

/// A handful of primitives inside a room whose walls act as background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub background: Material,
    /// Vertical field of view in degrees.
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    /// Camera ring radius as a multiple of the scene extent.
    #[serde(default = "default_ring")]
    pub ring_radius: f64,
    /// Camera elevation above the scene centre, degrees.
    #[serde(default = "default_elevation")]
    pub elevation_deg: f64,
    #[serde(default)]
    pub corruption: CorruptionConfig,
}

fn default_name() -> String {
    "synthetic".into()
}
fn default_fov() -> f64 {
    50.0
}
fn default_ring() -> f64 {
    3.0
}
fn default_elevation() -> f64 {
    30.0
}

impl Default for SceneConfig {
    /// Floor, back panel and three boxes, two of them checkered.
    fn default() -> Self {
        let checker = |size: f64, origin: [f64; 3], albedo: [f64; 3], roughness: f64, metallic: f64| Checker {
            size,
            origin,
            albedo,
            roughness,
            metallic,
        };
        let floor = Material {
            checker: Some(checker(0.5, [0.13, 0.37, 0.29], [0.25, 0.28, 0.33], 0.7, 0.15)),
            ..Material::plain([0.72, 0.68, 0.6], 0.35, 0.2)
        };
        let crate_box = Material {
            checker: Some(checker(0.25, [0.07, 0.11, 0.03], [0.2, 0.45, 0.7], 0.3, 0.75)),
            ..Material::plain([0.8, 0.35, 0.2], 0.6, 0.3)
        };
        Self {
            name: default_name(),
            primitives: vec![
                Primitive::Plane { origin: [-2.0, 0.0, -2.0], u: [4.0, 0.0, 0.0], v: [0.0, 0.0, 4.0], material: floor },
                Primitive::Plane {
                    origin: [-1.5, 0.0, -1.6],
                    u: [3.0, 0.0, 0.0],
                    v: [0.0, 1.4, 0.0],
                    material: Material::plain([0.3, 0.55, 0.4], 0.8, 0.15),
                },
                Primitive::Box { min: [-1.2, 0.0, -0.9], max: [-0.15, 1.05, 0.15], material: crate_box },
                Primitive::Box {
                    min: [0.3, 0.0, -0.3],
                    max: [1.15, 0.6, 0.55],
                    material: Material::plain([0.45, 0.5, 0.78], 0.25, 0.7),
                },
                Primitive::Box {
                    min: [-0.45, 0.0, 0.6],
                    max: [0.25, 0.4, 1.3],
                    material: Material::plain([0.85, 0.78, 0.3], 0.5, 0.45),
                },
            ],
            background: Material::plain([0.55, 0.55, 0.6], 0.85, 0.15),
            fov_deg: default_fov(),
            ring_radius: default_ring(),
            elevation_deg: default_elevation(),
            corruption: CorruptionConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidArgument("scene has no primitives".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.material()
                .validate()
                .map_err(|e| Error::InvalidArgument(format!("primitive {i}: {e}")))?;
            if let Primitive::Box { min, max, .. } = p {
                if (0..3).any(|k| !(min[k] < max[k])) {
                    return Err(Error::InvalidArgument(format!("primitive {i}: empty box")));
                }
            }
            if let Primitive::Plane { u, v, .. } = p {
                if Vector3::from(*u).cross(&Vector3::from(*v)).norm() < 1e-12 {
                    return Err(Error::InvalidArgument(format!("primitive {i}: degenerate plane")));
                }
            }
        }
        self.background
            .validate()
            .map_err(|e| Error::InvalidArgument(format!("background: {e}")))?;
        if !(self.fov_deg > 1.0 && self.fov_deg < 170.0) || !(self.ring_radius > 1.0) {
            return Err(Error::InvalidArgument("camera ring parameters out of range".into()));
        }
        self.corruption.validate()
    }

    /// Centre and half-diagonal of the primitives' bounding box.
    pub fn extent(&self) -> (Point3<f64>, f64) {
        let (lo, hi) = self.primitives.iter().map(Primitive::bounds).fold(
            (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), (a, b)| (lo.inf(&a.coords), hi.sup(&b.coords)),
        );
        (Point3::from((lo + hi) / 2.0), (hi - lo).norm() / 2.0)
    }

    /// Room enclosing the camera ring, centred on the scene.
    fn room(&self) -> ([f64; 3], [f64; 3]) {
        let (c, r) = self.extent();
        let half = 2.0 * self.ring_radius * r;
        ([c.x - half, c.y - half, c.z - half], [c.x + half, c.y + half, c.z + half])
    }
}

/// What a ray hit first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals camera depth for rays with unit camera z.
    pub t: f64,
    pub point: Point3<f64>,
    /// `None` for the room walls.
    pub primitive: Option<usize>,
    pub face: usize,
}

/// First intersection of `origin + t * dir` with the scene. Rays always hit
/// the room when started inside it.
pub fn cast_ray(scene: &SceneConfig, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in scene.primitives.iter().enumerate() {
        if let Some((t, face)) = p.intersect(origin, dir) {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, point: origin + dir * t, primitive: Some(i), face });
            }
        }
    }
    if best.is_some() {
        return best;
    }
    let (lo, hi) = scene.room();
    let (_, _, t_far, axis) = slab(origin, dir, &lo, &hi)?;
    let face = 2 * axis + usize::from(dir[axis] > 0.0);
    Some(Hit { t: t_far, point: origin + dir * t_far, primitive: None, face })
}

/// World-to-camera transform for an eye looking at `target`, with the
/// camera's y axis pointing along `-up`.
pub fn look_at(eye: &Point3<f64>, target: &Point3<f64>, up: &Vector3<f64>) -> Matrix4<f64> {
    let z = (target - eye).normalize();
    let x = z.cross(up).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let t = -(r * eye.coords);
    let mut e = Matrix4::identity();
    e.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    e.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    e
}

pub fn intrinsics_for(width: usize, height: usize, fov_deg: f64) -> Matrix3<f64> {
    let f = (height as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    Matrix3::new(
        f,
        0.0,
        (width as f64 - 1.0) / 2.0,
        0.0,
        f,
        (height as f64 - 1.0) / 2.0,
        0.0,
        0.0,
        1.0,
    )
}

/// Cameras evenly spaced in azimuth with seeded jitter in azimuth,
/// elevation and aim, expressed in the scene's own (y-up) frame.
pub fn camera_ring(scene: &SceneConfig, count: usize, width: usize, height: usize, seed: u64) -> Vec<Camera> {
    let (center, extent) = scene.extent();
    let radius = scene.ring_radius * extent;
    let k = intrinsics_for(width, height, scene.fov_deg);
    let mut rng = rng_for(seed, streams::CAMERAS);
    let spacing = 2.0 * PI / count as f64;
    (0..count)
        .map(|i| {
            let azimuth = i as f64 * spacing + rng.random_range(-0.25..=0.25) * spacing;
            let elevation = (scene.elevation_deg + rng.random_range(-5.0..=5.0)).to_radians();
            let eye = center
                + radius * Vector3::new(azimuth.cos() * elevation.cos(), elevation.sin(), azimuth.sin() * elevation.cos());
            let aim = center + Vector3::from_fn(|_, _| rng.random_range(-0.05..=0.05) * extent);
            Camera::new(k, look_at(&eye, &aim, &Vector3::y()), width, height)
        })
        .collect()
}

/// Renders exact geometry and ground-truth maps for one camera, in the
/// scene's frame. Predictions start equal to ground truth.
pub fn render_view(scene: &SceneConfig, camera: &Camera) -> Result<ViewFrame> {
    let (h, w) = (camera.height, camera.width);
    let k_inv = camera
        .intrinsics
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("singular intrinsics".into()))?;
    let r_t = camera.rotation().transpose();
    let eye = camera.center();
    let mut points = Raster::zeros(h, w, 3).to_f32();
    let mut depth = Raster::filled(h, w, 1, 0.0f32);
    let mut confidence = Raster::filled(h, w, 1, 0.0f32);
    let mut albedo = Raster::filled(h, w, 3, 0.0f32);
    let mut rough = Raster::filled(h, w, 1, 0.0f32);
    let mut metal = Raster::filled(h, w, 1, 0.0f32);
    for row in 0..h {
        for col in 0..w {
            let ray_cam = k_inv * Vector3::new(col as f64, row as f64, 1.0);
            let dir = r_t * (ray_cam / ray_cam.z);
            let hit = cast_ray(scene, &eye, &dir)
                .ok_or_else(|| Error::InvalidArgument("camera outside the room".into()))?;
            let material = hit.primitive.map_or(&scene.background, |i| scene.primitives[i].material());
            let (a, r, m) = material.at(&hit.point);
            let p = points.pixel_mut(row, col);
            for i in 0..3 {
                p[i] = hit.point[i] as f32;
            }
            depth.pixel_mut(row, col)[0] = hit.t as f32;
            confidence.pixel_mut(row, col)[0] = if hit.primitive.is_some() { 1.0 } else { BACKGROUND_CONFIDENCE };
            let px = albedo.pixel_mut(row, col);
            for i in 0..3 {
                px[i] = a[i] as f32;
            }
            rough.pixel_mut(row, col)[0] = r as f32;
            metal.pixel_mut(row, col)[0] = m as f32;
        }
    }
    let mut gt = BTreeMap::new();
    gt.insert(Modality::Albedo, IntrinsicMap::new(Modality::Albedo, albedo)?);
    gt.insert(Modality::Roughness, IntrinsicMap::new(Modality::Roughness, rough)?);
    gt.insert(Modality::Metallicity, IntrinsicMap::new(Modality::Metallicity, metal)?);
    Ok(ViewFrame {
        camera: camera.clone(),
        points,
        depth,
        confidence,
        depth_confidence: None,
        predictions: gt.clone(),
        gt,
        rgb: None,
    })
}

/// Rigidly re-expresses a rendered view in the frame whose world-to-frame
/// transform is `anchor`.
fn reanchor(view: &mut ViewFrame, anchor: &Matrix4<f64>, anchor_inv: &Matrix4<f64>) {
    view.camera.extrinsics *= anchor_inv;
    let r = anchor.fixed_view::<3, 3>(0, 0).into_owned();
    let t = anchor.fixed_view::<3, 1>(0, 3).into_owned();
    let (h, w) = (view.height(), view.width());
    let mut out = view.points.clone();
    for row in 0..h {
        for col in 0..w {
            let q = r * view.point(row, col).coords + t;
            let p = out.pixel_mut(row, col);
            for i in 0..3 {
                p[i] = q[i] as f32;
            }
        }
    }
    view.points = out;
}

fn rigid_inverse(e: &Matrix4<f64>) -> Matrix4<f64> {
    let r_t = e.fixed_view::<3, 3>(0, 0).transpose();
    let t = -(r_t * e.fixed_view::<3, 1>(0, 3));
    let mut inv = Matrix4::identity();
    inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_t);
    inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    inv
}

/// Renders `camera_count` views on a jittered ring; the world frame of the
/// bundle is camera 0's frame. Predictions equal ground truth until
/// [`corrupt_predictions`] is applied.
pub fn generate_scene(
    scene: &SceneConfig,
    camera_count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<SceneBundle> {
    scene.validate()?;
    if camera_count == 0 {
        return Err(Error::InvalidArgument("need at least one camera".into()));
    }
    if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
        return Err(Error::InvalidArgument(format!(
            "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {height}x{width}"
        )));
    }
    let cameras = camera_ring(scene, camera_count, width, height, seed);
    let anchor = cameras[0].extrinsics;
    let anchor_inv = rigid_inverse(&anchor);
    let views = cameras
        .par_iter()
        .map(|cam| {
            let mut v = render_view(scene, cam)?;
            reanchor(&mut v, &anchor, &anchor_inv);
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    let bundle = SceneBundle { scene_id: scene.name.clone(), seed, views };
    bundle.validate()?;
    Ok(bundle)
}

/// Generation followed by the scene's own corruption model.
pub fn generate_corrupted(
    scene: &SceneConfig,
    camera_count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<SceneBundle> {
    let clean = generate_scene(scene, camera_count, height, width, seed)?;
    corrupt_predictions(&clean, &scene.corruption, seed)
}

#[cfg(test)]
mod tests;
