#![allow(dead_code)]

use geoid_core::scene::{IntrinsicMap, SceneBundle};
use geoid_core::synth::{Material, Primitive, SceneConfig};

/// The default layout with every surface, background included, sharing one
/// plain material: no voxel can straddle a material edge.
pub fn single_material_scene() -> SceneConfig {
    let m = Material::plain([0.6, 0.45, 0.3], 0.4, 0.25);
    let mut scene = SceneConfig::default();
    for p in &mut scene.primitives {
        match p {
            Primitive::Box { material, .. } | Primitive::Plane { material, .. } => *material = m,
        }
    }
    scene.background = m;
    scene
}

pub fn max_abs_diff(a: &IntrinsicMap, b: &IntrinsicMap) -> f64 {
    a.raster()
        .data()
        .iter()
        .zip(b.raster().data())
        .map(|(x, y)| f64::from((x - y).abs()))
        .fold(0.0, f64::max)
}

/// Largest deviation of `preds` from the bundle's ground truth.
pub fn max_gt_error(bundle: &SceneBundle, preds: &[std::collections::BTreeMap<geoid_core::scene::Modality, IntrinsicMap>]) -> f64 {
    let mut worst = 0.0f64;
    for (view, maps) in bundle.views.iter().zip(preds) {
        for (m, p) in maps {
            worst = worst.max(max_abs_diff(p, &view.gt[m]));
        }
    }
    worst
}
