use super::*;
use crate::geometry::{filter_points, median_nn_distance, project, unproject, voxelize};
use crate::scene::save_bundle;

fn single_plane() -> SceneConfig {
    SceneConfig {
        primitives: vec![Primitive::Plane {
            origin: [-50.0, -50.0, 5.0],
            u: [100.0, 0.0, 0.0],
            v: [0.0, 100.0, 0.0],
            material: Material::plain([0.2, 0.4, 0.6], 0.3, 0.7),
        }],
        ..SceneConfig::default()
    }
}

fn small_box() -> SceneConfig {
    SceneConfig {
        primitives: vec![Primitive::Box {
            min: [-1.0, -1.0, -1.0],
            max: [1.0, 1.0, 1.0],
            material: Material::plain([0.5, 0.5, 0.5], 0.5, 0.5),
        }],
        ..SceneConfig::default()
    }
}

#[test]
fn fronto_parallel_plane_has_constant_depth_and_material() {
    let scene = single_plane();
    let cam = Camera::new(intrinsics_for(24, 20, 40.0), Matrix4::identity(), 24, 20);
    let v = render_view(&scene, &cam).unwrap();
    assert!(v.depth.data().iter().all(|&d| (d - 5.0).abs() < 1e-5));
    assert!(v.confidence.data().iter().all(|&c| c == 1.0));
    let a = &v.gt[&Modality::Albedo];
    for (row, col) in crate::scene::pixels(20, 24) {
        assert_eq!(a.pixel(row, col), &[0.2f32, 0.4, 0.6]);
        assert_eq!(v.gt[&Modality::Metallicity].pixel(row, col), &[0.7f32]);
    }
}

#[test]
fn points_are_unprojected_depths() {
    let b = generate_scene(&SceneConfig::default(), 5, 32, 40, 3).unwrap();
    for v in &b.views {
        for (row, col) in crate::scene::pixels(32, 40) {
            let p = unproject(col as f64, row as f64, v.depth_at(row, col), &v.camera);
            let q = v.point(row, col);
            assert!((p - q).norm() <= 1e-6 * q.coords.norm().max(1.0), "{p} vs {q}");
        }
    }
}

#[test]
fn world_frame_is_camera_zero() {
    let b = generate_scene(&SceneConfig::default(), 3, 16, 16, 9).unwrap();
    let e = b.views[0].camera.extrinsics;
    assert!((e - Matrix4::identity()).abs().max() < 1e-12);
    // Depth of view 0 is the z coordinate of its points.
    for (row, col) in crate::scene::pixels(16, 16) {
        let v = &b.views[0];
        assert!((v.point(row, col).z - v.depth_at(row, col)).abs() < 1e-4);
    }
}

#[test]
fn opposite_cameras_see_faces_given_by_normals() {
    let scene = small_box();
    let normals = [
        -Vector3::x(),
        Vector3::x(),
        -Vector3::y(),
        Vector3::y(),
        -Vector3::z(),
        Vector3::z(),
    ];
    let eyes = [Point3::new(4.0, 3.0, 5.0), Point3::new(-4.0, -3.0, -5.0)];
    let mut seen_sets = Vec::new();
    for eye in eyes {
        let cam = Camera::new(intrinsics_for(48, 48, 50.0), look_at(&eye, &Point3::origin(), &Vector3::y()), 48, 48);
        let k_inv = cam.intrinsics.try_inverse().unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for (row, col) in crate::scene::pixels(48, 48) {
            let dir = cam.rotation().transpose() * (k_inv * Vector3::new(col as f64, row as f64, 1.0));
            if let Some(Hit { primitive: Some(0), face, point, .. }) = cast_ray(&scene, &eye, &dir) {
                // The hit lies on the reported face.
                let axis = face / 2;
                let side = if face % 2 == 0 { -1.0 } else { 1.0 };
                assert!((point[axis] - side).abs() < 1e-9);
                seen.insert(face);
            }
        }
        let oracle: std::collections::BTreeSet<usize> = (0..6)
            .filter(|&f| {
                let center = Point3::from(normals[f]);
                normals[f].dot(&(eye - center)) > 0.0
            })
            .collect();
        assert_eq!(seen, oracle);
        seen_sets.push(seen);
    }
    assert!(seen_sets[0].is_disjoint(&seen_sets[1]));
}

#[test]
fn generation_is_deterministic_and_valid() {
    let scene = SceneConfig::default();
    let a = generate_corrupted(&scene, 4, 24, 24, 17).unwrap();
    let b = generate_corrupted(&scene, 4, 24, 24, 17).unwrap();
    a.validate().unwrap();
    assert_eq!(a, b);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_bundle(&a, da.path()).unwrap();
    save_bundle(&b, db.path()).unwrap();
    for entry in std::fs::read_dir(da.path()).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            std::fs::read(da.path().join(&name)).unwrap(),
            std::fs::read(db.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }
    let c = generate_corrupted(&scene, 4, 24, 24, 18).unwrap();
    assert_ne!(a, c);
}

#[test]
fn zero_corruption_leaves_ground_truth() {
    let clean = generate_scene(&SceneConfig::default(), 3, 20, 20, 1).unwrap();
    let out = corrupt_predictions(&clean, &CorruptionConfig::none(), 5).unwrap();
    for v in &out.views {
        assert_eq!(v.predictions, v.gt);
    }
    assert_eq!(out, clean);
}

#[test]
fn default_corruption_changes_predictions_within_range() {
    let clean = generate_scene(&SceneConfig::default(), 3, 32, 32, 1).unwrap();
    let out = corrupt_predictions(&clean, &CorruptionConfig::default(), 5).unwrap();
    out.validate().unwrap();
    for (c, v) in clean.views.iter().zip(&out.views) {
        assert_ne!(c.predictions, v.predictions);
        let low = v.confidence.data().iter().filter(|&&s| s < 0.35).count();
        assert_eq!(low, (0.05f64 * 1024.0).round() as usize);
    }
}

#[test]
fn low_confidence_pixels_never_reach_the_grid() {
    let clean = generate_scene(&SceneConfig::default(), 4, 24, 24, 2).unwrap();
    let b = corrupt_predictions(&clean, &CorruptionConfig { low_confidence_rate: 0.2, ..Default::default() }, 8).unwrap();
    let obs = filter_points(&b, 0.35);
    for o in &obs {
        assert!(b.views[o.view].confidence_at(o.row, o.col) >= 0.35);
    }
    let flagged: usize = b
        .views
        .iter()
        .map(|v| v.confidence.data().iter().filter(|&&s| s < 0.35).count())
        .sum();
    assert_eq!(obs.len() + flagged, 4 * 24 * 24);
    let grid = voxelize(&obs, 0.1).unwrap();
    assert!(grid
        .cells
        .values()
        .flatten()
        .all(|o| b.views[o.view].confidence_at(o.row, o.col) >= 0.35));
}

#[test]
fn shared_surface_points_land_in_neighbouring_cells() {
    let b = generate_scene(&SceneConfig::default(), 6, 32, 32, 4).unwrap();
    let points: Vec<_> = filter_points(&b, 0.35).iter().map(|o| o.point).collect();
    let delta = 2.5 * median_nn_distance(&points).unwrap();
    let grid = voxelize(&filter_points(&b, 0.35), delta).unwrap();
    let mut pairs = 0;
    for (i, vi) in b.views.iter().enumerate() {
        for (j, vj) in b.views.iter().enumerate() {
            if i == j {
                continue;
            }
            for (row, col) in crate::scene::pixels(32, 32) {
                if vi.confidence_at(row, col) < 1.0 {
                    continue;
                }
                let p = vi.point(row, col);
                let pr = project(&p, &vj.camera);
                let Some((r, c)) = pr.nearest_pixel(32, 32) else { continue };
                if (pr.depth - vj.depth_at(r, c)).abs() > 0.01 * pr.depth || vj.confidence_at(r, c) < 1.0 {
                    continue;
                }
                let (a, bb) = (grid.cell_of(&p), grid.cell_of(&vj.point(r, c)));
                let near = (0..3).all(|k| (a[k] - bb[k]).abs() <= 1);
                // Grazing views can legitimately hit a point a few pixels away.
                if (p - vj.point(r, c)).norm() < delta {
                    assert!(near, "views {i},{j} pixel ({row},{col})");
                    pairs += 1;
                }
            }
        }
    }
    assert!(pairs > 1000);
}

#[test]
fn config_round_trips_through_json() {
    let cfg = SceneConfig::default();
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    let back: SceneConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let minimal = r#"{"primitives":[{"kind":"box","min":[0,0,0],"max":[1,1,1],
        "material":{"albedo":[0.5,0.5,0.5],"roughness":0.5,"metallic":0.5}}],
        "background":{"albedo":[0.1,0.1,0.1],"roughness":0.9,"metallic":0.1}}"#;
    let m: SceneConfig = serde_json::from_str(minimal).unwrap();
    m.validate().unwrap();
    assert_eq!(m.corruption, CorruptionConfig::default());
}

#[test]
fn degenerate_configs_are_rejected() {
    let empty = SceneConfig { primitives: vec![], ..SceneConfig::default() };
    assert!(generate_scene(&empty, 2, 16, 16, 0).is_err());
    let mut bad = small_box();
    if let Primitive::Box { material, .. } = &mut bad.primitives[0] {
        material.roughness = 1.5;
    }
    assert!(bad.validate().is_err());
    assert!(generate_scene(&small_box(), 0, 16, 16, 0).is_err());
    assert!(generate_scene(&small_box(), 1, 8, 16, 0).is_err());
}

#[test]
fn checker_alternates_between_cells() {
    let m = Material {
        checker: Some(Checker { size: 1.0, origin: [0.0; 3], albedo: [0.0; 3], roughness: 0.0, metallic: 0.0 }),
        ..Material::plain([1.0; 3], 1.0, 1.0)
    };
    assert_eq!(m.at(&Point3::new(0.5, 0.5, 0.5)).1, 1.0);
    assert_eq!(m.at(&Point3::new(1.5, 0.5, 0.5)).1, 0.0);
    assert_eq!(m.at(&Point3::new(-0.5, 0.5, 0.5)).1, 0.0);
    assert_eq!(m.at(&Point3::new(1.5, 1.5, 0.5)).1, 1.0);
}
