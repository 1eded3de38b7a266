//! Camera projection, depth-verified visibility, confidence filtering and
//! voxelization of the pooled point cloud.

use std::collections::{BTreeMap, BTreeSet};
use std::num::NonZero;

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{pixels, sample_indices, Camera, SceneBundle, ViewFrame};
use crate::stats::lower_median;

/// Query budget of the sampled nearest-neighbour spacing estimate.
pub const NN_SAMPLE_LIMIT: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Horizontal image coordinate (column axis).
    pub x: f64,
    /// Vertical image coordinate (row axis).
    pub y: f64,
    /// Camera-frame depth. Negative behind the camera.
    pub depth: f64,
}

impl Projection {
    /// Nearest pixel `(row, col)` when it falls inside a `height x width` image.
    pub fn nearest_pixel(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        let col = self.x.round();
        let row = self.y.round();
        if !(col.is_finite() && row.is_finite()) || col < 0.0 || row < 0.0 {
            return None;
        }
        let (row, col) = (row as usize, col as usize);
        (row < height && col < width).then_some((row, col))
    }
}

/// Projects a world point. Points at or behind the camera are returned
/// as-is; callers decide what to do with them.
pub fn project(point: &Point3<f64>, camera: &Camera) -> Projection {
    let q = camera.world_to_camera(point);
    let k = camera.intrinsics * q.coords;
    Projection {
        x: k.x / q.z,
        y: k.y / q.z,
        depth: q.z,
    }
}

/// Inverse of [`project`] for a known depth.
pub fn unproject(x: f64, y: f64, depth: f64, camera: &Camera) -> Point3<f64> {
    let k = &camera.intrinsics;
    let (fx, fy, s, cx, cy) = (k[(0, 0)], k[(1, 1)], k[(0, 1)], k[(0, 2)], k[(1, 2)]);
    let yc = (y - cy) / fy;
    let xc = (x - cx - s * yc) / fx;
    camera.camera_to_world(&Point3::new(xc * depth, yc * depth, depth))
}

/// Depth-verified visibility of a voxel centre in a view: the projection
/// must land in bounds in front of the camera, and its depth must agree
/// with the view's depth map at the rounded pixel within relative
/// tolerance `eps_vis`.
pub fn check_visibility(center: &Point3<f64>, view: &ViewFrame, eps_vis: f64) -> bool {
    visible_pixel(center, view, eps_vis).is_some()
}

/// Like [`check_visibility`] but also returns the rounded pixel.
pub fn visible_pixel(center: &Point3<f64>, view: &ViewFrame, eps_vis: f64) -> Option<(usize, usize)> {
    let p = project(center, &view.camera);
    if !(p.depth > 0.0) {
        return None;
    }
    let (row, col) = p.nearest_pixel(view.height(), view.width())?;
    let d = view.depth_at(row, col);
    if !(d > 0.0) {
        return None;
    }
    ((p.depth - d).abs() / d < eps_vis).then_some((row, col))
}

/// A retained 3D point with its provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub view: usize,
    pub row: usize,
    pub col: usize,
    pub point: Point3<f64>,
    pub confidence: f64,
}

impl Observation {
    fn key(&self) -> (usize, usize, usize) {
        (self.view, self.row, self.col)
    }
}

/// Every pixel with point confidence at least `tau_c`, view-major then
/// row-major.
pub fn filter_points(bundle: &SceneBundle, tau_c: f64) -> Vec<Observation> {
    bundle
        .views
        .par_iter()
        .enumerate()
        .map(|(vi, view)| {
            pixels(view.height(), view.width())
                .filter_map(|(row, col)| {
                    let confidence = view.confidence_at(row, col);
                    (confidence >= tau_c).then(|| Observation {
                        view: vi,
                        row,
                        col,
                        point: view.point(row, col),
                        confidence,
                    })
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

fn nn_distances(points: &[Point3<f64>], queries: &[usize]) -> Vec<f64> {
    let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree: ImmutableKdTree<f64, u64, 3, 32> = ImmutableKdTree::new_from_slice(&coords);
    let two = NonZero::new(2).expect("nonzero");
    queries
        .par_iter()
        .map(|&i| {
            tree.nearest_n::<SquaredEuclidean>(&coords[i], two)
                .into_iter()
                .find(|n| n.item as usize != i)
                .map(|n| n.distance.sqrt())
                .expect("at least two points")
        })
        .collect()
}

/// Median over all points of the distance to the nearest other point
/// (lower median for even counts).
pub fn median_nn_distance(points: &[Point3<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Empty("nearest-neighbour distance needs at least two points"));
    }
    let all: Vec<usize> = (0..points.len()).collect();
    Ok(lower_median(&mut nn_distances(points, &all)))
}

/// Median nearest-neighbour distance estimated from at most `max_queries`
/// seeded query points, each searched against the full cloud. Exact when
/// the cloud is no larger than the budget.
pub fn median_nn_distance_sampled(points: &[Point3<f64>], max_queries: usize, seed: u64) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Empty("nearest-neighbour distance needs at least two points"));
    }
    if points.len() <= max_queries {
        return median_nn_distance(points);
    }
    let mut rng = crate::rng::rng_for(seed, crate::rng::streams::NN_SUBSAMPLE);
    let queries = sample_indices(points.len(), max_queries, &mut rng);
    Ok(lower_median(&mut nn_distances(points, &queries)))
}

pub type CellIndex = [i64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub origin: Point3<f64>,
    pub delta: f64,
    /// Cells in lexicographic index order; observations within a cell are
    /// sorted by `(view, row, col)`.
    pub cells: BTreeMap<CellIndex, Vec<Observation>>,
}

impl VoxelGrid {
    pub fn cell_of(&self, p: &Point3<f64>) -> CellIndex {
        cell_index(p, &self.origin, self.delta)
    }

    pub fn center(&self, cell: &CellIndex) -> Point3<f64> {
        self.origin + Vector3::new(cell[0] as f64 + 0.5, cell[1] as f64 + 0.5, cell[2] as f64 + 0.5) * self.delta
    }

    pub fn observation_count(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

fn cell_index(p: &Point3<f64>, origin: &Point3<f64>, delta: f64) -> CellIndex {
    let d = (p - origin) / delta;
    [d.x.floor() as i64, d.y.floor() as i64, d.z.floor() as i64]
}

pub(crate) fn distinct_views(obs: &[Observation]) -> usize {
    obs.iter().map(|o| o.view).collect::<BTreeSet<_>>().len()
}

/// Bins observations into cubes of side `delta` anchored at the
/// component-wise minimum of the points.
pub fn voxelize(observations: &[Observation], delta: f64) -> Result<VoxelGrid> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("voxel size must be positive, got {delta}")));
    }
    if observations.is_empty() {
        return Err(Error::Empty("voxelize needs at least one observation"));
    }
    let origin = observations.iter().fold(Point3::from([f64::INFINITY; 3]), |m, o| {
        Point3::new(m.x.min(o.point.x), m.y.min(o.point.y), m.z.min(o.point.z))
    });
    let mut cells: BTreeMap<CellIndex, Vec<Observation>> = BTreeMap::new();
    for o in observations {
        cells.entry(cell_index(&o.point, &origin, delta)).or_default().push(*o);
    }
    for obs in cells.values_mut() {
        obs.sort_by_key(Observation::key);
    }
    Ok(VoxelGrid { origin, delta, cells })
}

/// Drops cells seen by fewer than `n_min` distinct views.
pub fn prune_cells(grid: &VoxelGrid, n_min: usize) -> VoxelGrid {
    VoxelGrid {
        origin: grid.origin,
        delta: grid.delta,
        cells: grid
            .cells
            .iter()
            .filter(|(_, obs)| distinct_views(obs) >= n_min)
            .map(|(k, v)| (*k, v.clone()))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;
    use crate::scene::tests::tiny_view;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Matrix4, Rotation3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(f: f64, cx: f64, cy: f64, pose: Matrix4<f64>) -> Camera {
        Camera::new(Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0), pose, 64, 48)
    }

    fn obs(view: usize, p: [f64; 3]) -> Observation {
        Observation {
            view,
            row: 0,
            col: 0,
            point: Point3::from(p),
            confidence: 1.0,
        }
    }

    fn brute_nn_median(points: &[Point3<f64>]) -> f64 {
        let mut d: Vec<f64> = (0..points.len())
            .map(|i| {
                (0..points.len())
                    .filter(|&j| j != i)
                    .map(|j| (points[i] - points[j]).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        d.sort_by(f64::total_cmp);
        d[(d.len() - 1) / 2]
    }

    #[test]
    fn principal_axis_point_hits_principal_point() {
        let cam = camera(50.0, 31.5, 23.5, Matrix4::identity());
        let p = project(&Point3::new(0.0, 0.0, 1.0), &cam);
        assert_eq!((p.x, p.y, p.depth), (31.5, 23.5, 1.0));
        let behind = project(&Point3::new(0.0, 0.0, -1.0), &cam);
        assert_eq!(behind.depth, -1.0);
    }

    #[test]
    fn project_unproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rot = Rotation3::from_euler_angles(0.3, -0.7, 1.1);
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::new(0.2, -1.0, 4.0));
        let cam = camera(80.0, 30.0, 20.0, pose);
        for _ in 0..100 {
            let p = Point3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let pr = project(&p, &cam);
            assert!(pr.depth > 0.0);
            let back = unproject(pr.x, pr.y, pr.depth, &cam);
            assert!((back - p).norm() < 1e-6, "{p} vs {back}");
        }
    }

    fn depth_view(d: f32) -> ViewFrame {
        let mut v = tiny_view(5, 5);
        v.camera.intrinsics = Matrix3::new(4.0, 0.0, 2.0, 0.0, 4.0, 2.0, 0.0, 0.0, 1.0);
        v.depth = Raster::filled(5, 5, 1, d);
        v
    }

    #[test]
    fn visibility_relative_depth_test() {
        let c = Point3::new(0.0, 0.0, 1.0);
        // |1 - 1.04| / 1.04 = 0.0385 < 0.05
        assert!(check_visibility(&c, &depth_view(1.04), 0.05));
        // |1 - 0.9| / 0.9 = 0.111
        assert!(!check_visibility(&c, &depth_view(0.90), 0.05));
        assert!(!check_visibility(&Point3::new(0.0, 0.0, -1.0), &depth_view(1.0), 0.05));
        // Projects to column 2 + 4*10 = 42, outside a 5-wide image.
        assert!(!check_visibility(&Point3::new(10.0, 0.0, 1.0), &depth_view(1.0), 0.05));
    }

    #[test]
    fn filter_counts_match_scan() {
        let mut v = tiny_view(4, 4);
        v.confidence = Raster::from_fn(4, 4, 1, |r, c, _| ((r * 4 + c) as f32) / 15.0);
        let mut b = SceneBundle { scene_id: "f".into(), seed: 0, views: vec![v.clone(), v] };
        let expected = b.views[0].confidence.data().iter().filter(|&&c| f64::from(c) >= 0.35).count() * 2;
        assert_eq!(filter_points(&b, 0.35).len(), expected);
        let all = filter_points(&b, 0.0 + f64::MIN_POSITIVE);
        assert_eq!(all.len(), 30);
        assert!(all.windows(2).all(|w| w[0].key() < w[1].key()));
        for v in &mut b.views {
            v.confidence = Raster::filled(4, 4, 1, 0.1);
        }
        assert!(filter_points(&b, 0.35).is_empty());
        for v in &mut b.views {
            v.confidence = Raster::filled(4, 4, 1, 1.0);
        }
        assert_eq!(filter_points(&b, 0.35).len(), 32);
    }

    #[test]
    fn nn_distance_simple_configurations() {
        let cube: Vec<Point3<f64>> = (0..8)
            .map(|i| Point3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        assert_eq!(median_nn_distance(&cube).unwrap(), 1.0);
        let pair = [Point3::new(0.0, 0.0, 0.0), Point3::new(3.0, 0.0, 0.0)];
        assert_eq!(median_nn_distance(&pair).unwrap(), 3.0);
        assert!(median_nn_distance(&pair[..1]).is_err());
    }

    #[test]
    fn nn_distance_matches_quadratic_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Point3<f64>> = (0..500)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random::<f64>() * 0.1))
            .collect();
        let fast = median_nn_distance(&pts).unwrap();
        assert!((fast - brute_nn_median(&pts)).abs() < 1e-9);
        assert_eq!(median_nn_distance_sampled(&pts, 1000, 1).unwrap(), fast);
        let sampled = median_nn_distance_sampled(&pts, 200, 1).unwrap();
        assert!((sampled / fast - 1.0).abs() < 0.25);
    }

    #[test]
    fn nn_distance_handles_duplicates_on_axis_planes() {
        let mut pts: Vec<Point3<f64>> = (0..400).map(|i| Point3::new((i % 20) as f64, (i / 20) as f64, 0.0)).collect();
        pts.push(Point3::new(0.0, 0.0, 0.0));
        assert_eq!(median_nn_distance(&pts).unwrap(), 1.0);
    }

    #[test]
    fn voxel_indices_follow_floor() {
        let g = voxelize(&[obs(0, [0.1, 0.0, 0.0]), obs(1, [2.6, 0.0, 0.0])], 1.0).unwrap();
        let keys: Vec<_> = g.cells.keys().copied().collect();
        assert_eq!(keys, vec![[0, 0, 0], [2, 0, 0]]);
        let one = voxelize(&[obs(0, [0.1, 0.1, 0.1]), obs(1, [0.5, 0.2, 0.9]), obs(2, [0.3, 0.3, 0.3])], 1.0).unwrap();
        assert_eq!(one.len(), 1);
        assert!(voxelize(&[obs(0, [0.0; 3])], 0.0).is_err());
        assert!(voxelize(&[], 1.0).is_err());
    }

    #[test]
    fn pruning_by_distinct_views() {
        let single: Vec<_> = (0..5).map(|i| obs(0, [0.1 * i as f64, 0.0, 0.0])).collect();
        let g = voxelize(&single, 1.0).unwrap();
        assert!(prune_cells(&g, 2).is_empty());
        let pair = voxelize(&[obs(0, [0.1, 0.0, 0.0]), obs(1, [0.2, 0.0, 0.0])], 1.0).unwrap();
        assert_eq!(prune_cells(&pair, 2).len(), 1);
    }

    #[test]
    fn pruning_matches_exhaustive_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let o: Vec<_> = (0..400)
            .map(|_| obs(rng.random_range(0..4), [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), 0.0]))
            .collect();
        let g = voxelize(&o, 0.7).unwrap();
        for n_min in 1..=4 {
            let pruned = prune_cells(&g, n_min);
            for (k, cell) in &g.cells {
                let views: BTreeSet<usize> = cell.iter().map(|o| o.view).collect();
                assert_eq!(pruned.cells.contains_key(k), views.len() >= n_min);
            }
        }
    }

    proptest! {
        #[test]
        fn voxelize_conserves_and_places_every_point(
            raw in prop::collection::vec((0usize..3, -50i32..50, -50i32..50, -50i32..50), 1..200),
            delta in 0.05f64..3.0,
        ) {
            let o: Vec<_> = raw.iter().map(|&(v, x, y, z)| obs(v, [x as f64 / 7.0, y as f64 / 7.0, z as f64 / 7.0])).collect();
            let g = voxelize(&o, delta).unwrap();
            prop_assert_eq!(g.observation_count(), o.len());
            for (k, cell) in &g.cells {
                for ob in cell {
                    prop_assert_eq!(&g.cell_of(&ob.point), k);
                    prop_assert!(k.iter().all(|&i| i >= 0));
                }
            }
        }

        #[test]
        fn voxel_structure_is_translation_consistent(
            raw in prop::collection::vec((-64i32..64, -64i32..64, -64i32..64), 2..100),
            shift in (-8i32..8, -8i32..8, -8i32..8),
        ) {
            // Dyadic coordinates and integer shifts keep the arithmetic exact.
            let o: Vec<_> = raw.iter().map(|&(x, y, z)| obs(0, [x as f64 / 16.0, y as f64 / 16.0, z as f64 / 16.0])).collect();
            let s = Vector3::new(shift.0 as f64, shift.1 as f64, shift.2 as f64);
            let moved: Vec<_> = o.iter().map(|ob| Observation { point: ob.point + s, ..*ob }).collect();
            let a = voxelize(&o, 0.25).unwrap();
            let b = voxelize(&moved, 0.25).unwrap();
            let ka: Vec<_> = a.cells.iter().map(|(k, v)| (*k, v.len())).collect();
            let kb: Vec<_> = b.cells.iter().map(|(k, v)| (*k, v.len())).collect();
            prop_assert_eq!(ka, kb);
        }

        #[test]
        fn nn_median_is_permutation_invariant_and_scales(
            raw in prop::collection::vec((-100i32..100, -100i32..100, -100i32..100), 2..60),
            scale in 0.1f64..10.0,
            rot in 0usize..60,
        ) {
            let pts: Vec<Point3<f64>> = raw.iter().map(|&(x, y, z)| Point3::new(x as f64, y as f64, z as f64)).collect();
            let base = median_nn_distance(&pts).unwrap();
            let mut rotated = pts.clone();
            let n = rotated.len();
            rotated.rotate_left(rot % n);
            prop_assert_eq!(median_nn_distance(&rotated).unwrap(), base);
            let scaled: Vec<_> = pts.iter().map(|p| Point3::from(p.coords * scale)).collect();
            assert_relative_eq!(median_nn_distance(&scaled).unwrap(), scale * base, max_relative = 1e-12);
        }
    }
}
