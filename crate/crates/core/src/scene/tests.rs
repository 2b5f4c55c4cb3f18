use std::collections::HashSet;

use proptest::prelude::*;

use super::*;
use crate::geometry::{point_in_polygon, segments_intersect};

fn still_actor(x: f64, y: f64, length: f64, width: f64, heading: f64) -> Actor {
    let pose = Pose::new(x, y, heading);
    Actor {
        kind: ActorKind::Parked,
        center: [x, y],
        size: [length, width],
        heading,
        future_track: vec![pose; FUTURE_STEPS],
        past_track: vec![pose; PAST_SWEEPS],
    }
}

fn straight_lane(y: f64) -> Lane {
    Lane { centerline: vec![[-40.0, y], [60.0, y]], width: LANE_WIDTH }
}

/// Oriented boxes intersect iff an edge pair crosses or one contains a
/// corner of the other.
fn polygons_intersect(a: &OrientedBox, b: &OrientedBox) -> bool {
    let (pa, pb) = (a.corners(), b.corners());
    for i in 0..4 {
        for j in 0..4 {
            if segments_intersect(pa[i], pa[(i + 1) % 4], pb[j], pb[(j + 1) % 4]) {
                return true;
            }
        }
    }
    point_in_polygon(pa[0], &pb) || point_in_polygon(pb[0], &pa)
}

#[test]
fn same_seed_is_bit_identical() {
    let a = generate_scene(7, Difficulty::Sparse);
    let b = generate_scene(7, Difficulty::Sparse);
    assert!(a.actors.len() <= 5 && !a.actors.is_empty());
    assert_eq!(a, b);
    assert_eq!(a.to_text(), b.to_text());
    assert_ne!(a, generate_scene(8, Difficulty::Sparse));
}

#[test]
fn dense_scenes_have_no_overlap_at_start() {
    for seed in 1..=100 {
        let s = generate_scene(seed, Difficulty::Dense);
        assert!((1..=40).contains(&s.actors.len()), "seed {seed}: {}", s.actors.len());
        for (i, a) in s.actors.iter().enumerate() {
            for b in &s.actors[i + 1..] {
                assert!(!polygons_intersect(&a.bbox(), &b.bbox()), "seed {seed}");
            }
            assert!(!polygons_intersect(&a.bbox(), &ego_box(Pose::new(0.0, 0.0, 0.0))));
        }
    }
}

#[test]
fn actor_counts_follow_difficulty() {
    for d in Difficulty::ALL {
        let (lo, hi) = d.actor_range();
        let counts: Vec<usize> = (0..20).map(|s| generate_scene(s, d).actors.len()).collect();
        assert!(counts.iter().all(|&n| n >= 1 && n <= hi), "{d}: {counts:?}");
        let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        assert!(mean >= lo as f64 * 0.8, "{d}: mean {mean}");
    }
}

#[test]
fn ego_track_is_feasible_and_in_bounds() {
    for seed in 0..50 {
        let s = generate_scene(seed, Difficulty::ALL[seed as usize % 3]);
        assert_eq!(s.ego_track.len(), PAST_SWEEPS + FUTURE_STEPS);
        assert_eq!(s.ego_at_sweep(0), Pose::new(0.0, 0.0, 0.0));
        for p in &s.ego_track {
            assert!(s.grid.contains([p.x, p.y]), "seed {seed}: {p:?}");
        }
        let mut prev = s.ego_at_sweep(0);
        let mut prev_v: Option<f64> = None;
        for p in s.ego_future() {
            let v = (p.x - prev.x).hypot(p.y - prev.y) / STEP_DT;
            assert!(v <= 15.0 + 1e-9);
            if let Some(pv) = prev_v {
                // Chord speeds on a curved lane differ slightly from arc speeds.
                assert!((v - pv).abs() / STEP_DT <= 3.0 + 1e-2, "seed {seed}: accel");
            }
            if v > 0.5 {
                let dth = crate::geometry::wrap_angle(p.theta - prev.theta);
                assert!(dth.abs() / (v * STEP_DT) <= 0.2, "seed {seed}: curvature");
            }
            prev = *p;
            prev_v = Some(v);
        }
    }
}

#[test]
fn lidar_without_actors_hits_only_lanes() {
    let mut s = generate_scene(3, Difficulty::Urban);
    s.actors.clear();
    let half_diag = s.grid.resolution * std::f64::consts::FRAC_1_SQRT_2;
    for k in [0, 5, 9] {
        let pts = simulate_lidar(&s, k).unwrap();
        assert!(!pts.is_empty());
        for p in pts {
            assert_eq!(p.z, 0.0);
            let d = s.lanes.iter().map(|l| l.distance([p.x, p.y]) - l.width / 2.0).fold(f64::INFINITY, f64::min);
            assert!(d <= half_diag, "{p:?} is {d} m off the lane surface");
        }
    }
}

#[test]
fn occluded_actor_returns_no_points() {
    let mut s = Scene::empty(Grid::default(), vec![]);
    s.actors = vec![still_actor(10.0, 0.0, 2.0, 4.0, 0.0), still_actor(20.0, 0.0, 2.0, 3.0, 0.0)];
    let pts = simulate_lidar(&s, 0).unwrap();
    assert!(!pts.is_empty());
    assert!(pts.iter().all(|p| p.x < 12.0));
}

#[test]
fn body_points_halve_with_distance() {
    let count = |d: f64| {
        let mut s = Scene::empty(Grid::default(), vec![]);
        s.actors = vec![still_actor(d, 0.0, 4.5, 2.0, std::f64::consts::FRAC_PI_2)];
        simulate_lidar(&s, 0).unwrap().len() as f64
    };
    for d in [5.0, 8.0, 10.0, 15.0] {
        let ratio = count(2.0 * d) / count(d);
        assert!((0.4..=0.6).contains(&ratio), "d = {d}: ratio {ratio}");
    }
}

#[test]
fn lidar_rejects_future_sweep() {
    let s = generate_scene(1, Difficulty::Sparse);
    assert!(simulate_lidar(&s, PAST_SWEEPS).is_err());
}

#[test]
fn single_point_marks_one_voxel() {
    let g = Grid::default();
    let c = g.cell_center(17, 40);
    let pts = vec![vec![], vec![LidarPoint { x: c[0], y: c[1], z: 0.7 }]];
    let t = rasterize_points(&g, &pts).unwrap();
    assert_eq!(t.sum(), 1.0);
    assert_eq!(t.at4(0, HEIGHT_SLICES + 1, 17, 40), 1.0);
}

#[test]
fn empty_scene_rasterizes_to_zero() {
    let s = Scene::empty(Grid::default(), vec![]);
    let bev = rasterize(&s).unwrap();
    assert_eq!(bev.channels(), INPUT_CHANNELS);
    assert!(bev.tensor.data().iter().all(|&v| v == 0.0));
}

#[test]
fn removing_actors_leaves_map_channels_unchanged() {
    let s = generate_scene(11, Difficulty::Dense);
    let mut bare = s.clone();
    bare.actors.clear();
    let (a, b) = (rasterize(&s).unwrap(), rasterize(&bare).unwrap());
    assert_eq!(a.map(), b.map());
    assert!(b.occupancy().iter().all(|&v| v == 0.0 || v == 1.0));
    let body: f32 = (0..PAST_SWEEPS)
        .flat_map(|k| (1..HEIGHT_SLICES).map(move |z| k * HEIGHT_SLICES + z))
        .map(|c| b.tensor.channels(c, 1).unwrap().sum())
        .sum();
    assert_eq!(body, 0.0);
}

#[test]
fn occupancy_matches_independent_binning() {
    for seed in 0..5 {
        let s = generate_scene(seed, Difficulty::Urban);
        let g = s.grid;
        let bev = rasterize(&s).unwrap();
        let mut cells = HashSet::new();
        let mut total_points = 0;
        for k in 0..PAST_SWEEPS {
            let pts = simulate_lidar(&s, k).unwrap();
            total_points += pts.len();
            for p in pts {
                let fi = (p.x - g.x_min) / g.resolution;
                let fj = (p.y - g.y_min) / g.resolution;
                if fi < 0.0 || fj < 0.0 || fi >= 96.0 || fj >= 96.0 {
                    continue;
                }
                let slice = if p.z < 0.2 { 0 } else if p.z < 1.0 { 1 } else { 2 };
                cells.insert((k * 3 + slice, fi as usize, fj as usize));
            }
        }
        let active: f32 = bev.occupancy().iter().sum();
        assert_eq!(active as usize, cells.len());
        assert!(cells.len() <= total_points);
    }
}

#[test]
fn uneven_resolution_is_rejected() {
    let mut s = generate_scene(1, Difficulty::Sparse);
    s.grid.resolution = 0.7;
    assert!(rasterize(&s).is_err());
}

#[test]
fn two_cell_actor_labels_exactly_those_cells() {
    let mut s = Scene::empty(Grid::default(), vec![]);
    s.actors = vec![still_actor(-5.0, -16.0, 3.0, 1.5, std::f64::consts::FRAC_PI_2)];
    let l = rasterize_labels(&s).unwrap();
    let on: Vec<(usize, usize)> =
        (0..l.rows).flat_map(|i| (0..l.cols).map(move |j| (i, j))).filter(|&(i, j)| l.score.at4(0, 0, i, j) == 1.0).collect();
    assert_eq!(on, vec![(3, 3), (3, 4)]);
    assert_eq!(l.owner[3 * l.cols + 3], Some(0));
}

#[test]
fn small_actor_claims_its_center_cell() {
    let mut s = Scene::empty(Grid::default(), vec![]);
    s.actors = vec![still_actor(-5.5, -16.5, 0.4, 0.4, 0.3)];
    let l = rasterize_labels(&s).unwrap();
    assert_eq!(l.positives(), 1);
    assert_eq!(l.owner[3 * l.cols + 3], Some(0));
}

#[test]
fn anchor_aligned_actor_has_identity_delta() {
    let g = Grid::default();
    let c = g.cell_center_scaled(5, 7, FEATURE_STRIDE);
    let mut s = Scene::empty(g, vec![]);
    s.actors = vec![still_actor(c[0], c[1], ANCHOR_LENGTH, ANCHOR_WIDTH, 0.0)];
    let l = rasterize_labels(&s).unwrap();
    let d: Vec<f32> = (0..6).map(|ch| l.regression.at4(0, ch, 5, 7)).collect();
    assert_eq!(d, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn label_owners_are_consistent() {
    for seed in 0..20 {
        let s = generate_scene(seed, Difficulty::Dense);
        let l = rasterize_labels(&s).unwrap();
        for i in 0..l.rows {
            for j in 0..l.cols {
                let owned = l.owner[i * l.cols + j];
                assert_eq!(owned.is_some(), l.score.at4(0, 0, i, j) == 1.0);
                if let Some(k) = owned {
                    let a = &s.actors[k];
                    let c = s.grid.cell_center_scaled(i, j, FEATURE_STRIDE);
                    let fallback = s.grid.cell_of_scaled(a.center, FEATURE_STRIDE) == Some((i, j));
                    assert!(a.bbox().contains(c) || fallback);
                }
            }
        }
    }
}

#[test]
fn scene_text_round_trip() {
    let s = generate_scene(21, Difficulty::Urban);
    let text = s.to_text();
    assert!(text.starts_with("sadrive-scene v1\n"));
    assert_eq!(Scene::from_text(&text).unwrap(), s);
    assert!(Scene::from_text(&text.replacen("v1", "v9", 1)).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.scene");
    save_scene(&path, &s).unwrap();
    assert_eq!(load_scene(&path).unwrap(), s);
}

#[test]
fn bev_bytes_round_trip() {
    let bev = rasterize(&generate_scene(2, Difficulty::Sparse)).unwrap();
    let bytes = bev.to_bytes();
    assert_eq!(&bytes[..4], BEV_MAGIC);
    assert_eq!(BevInput::from_bytes(&bytes).unwrap(), bev);
    assert!(BevInput::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn lane_pose_extrapolates_past_ends() {
    let l = straight_lane(2.0);
    assert_eq!(l.pose_at(-5.0), Pose::new(-45.0, 2.0, 0.0));
    assert_eq!(l.pose_at(105.0), Pose::new(65.0, 2.0, 0.0));
}

proptest! {
    #[test]
    fn delta_round_trip(ax in -20.0..20.0f64, ay in -20.0..20.0f64, dx in -3.0..3.0f64, dy in -3.0..3.0f64,
                        l in 0.5..8.0f64, w in 0.5..3.0f64, th in -3.1..3.1f64) {
        let anchor = OrientedBox::new(ax, ay, ANCHOR_LENGTH, ANCHOR_WIDTH, 0.0);
        let b = OrientedBox::new(ax + dx, ay + dy, l, w, th);
        let d = encode_delta(&anchor, &b);
        prop_assert!((d[4] * d[4] + d[5] * d[5] - 1.0).abs() < 1e-12);
        let r = decode_delta(&anchor, &d);
        prop_assert!((r.cx - b.cx).abs() < 1e-9 && (r.cy - b.cy).abs() < 1e-9);
        prop_assert!((r.length - b.length).abs() < 1e-9 && (r.width - b.width).abs() < 1e-9);
        prop_assert!(crate::geometry::wrap_angle(r.heading - b.heading).abs() < 1e-9);
    }
}
