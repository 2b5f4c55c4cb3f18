use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{point_in_polygon, segments_intersect};
use crate::scene::{encode_delta, generate_scene, ActorKind, Difficulty, Lane, FUTURE_STEPS, PAST_SWEEPS};

fn straight(y: f64) -> Vec<Pose> {
    (1..=FUTURE_STEPS).map(|t| Pose::new(4.0 * t as f64, y, 0.0)).collect()
}

fn actor_on(track: &[Pose], size: [f64; 2]) -> Actor {
    Actor {
        kind: ActorKind::Vehicle,
        center: [track[0].x, track[0].y],
        size,
        heading: track[0].theta,
        future_track: track.to_vec(),
        past_track: vec![track[0]; PAST_SWEEPS],
    }
}

fn random_box(rng: &mut ChaCha8Rng, spread: f64) -> OrientedBox {
    OrientedBox::new(
        rng.gen_range(-spread..spread),
        rng.gen_range(-spread..spread),
        rng.gen_range(1.0..6.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(-3.2..3.2),
    )
}

/// Two convex quads overlap iff some edges cross or one holds a corner of
/// the other.
fn overlap_oracle(a: &OrientedBox, b: &OrientedBox) -> bool {
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
fn l2_trivial_cases() {
    let gt = straight(0.0);
    assert!(planning_l2(&gt, &gt).unwrap().iter().all(|&d| d == 0.0));
    let d = planning_l2(&straight(1.0), &gt).unwrap();
    assert_eq!(d.len(), FUTURE_STEPS);
    assert!((d[FUTURE_STEPS - 1] - 1.0).abs() < 1e-12);
    assert!(planning_l2(&gt[..3], &gt).is_err());
}

#[test]
fn l2_matches_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let a: Vec<Pose> = (0..FUTURE_STEPS).map(|_| Pose::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), 0.0)).collect();
        let b: Vec<Pose> = (0..FUTURE_STEPS).map(|_| Pose::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), 0.0)).collect();
        let d = planning_l2(&a, &b).unwrap();
        for t in 0..FUTURE_STEPS {
            let want = ((a[t].x - b[t].x).powi(2) + (a[t].y - b[t].y).powi(2)).sqrt();
            assert!((d[t] - want).abs() <= 1e-12 * want.max(1.0));
        }
    }
}

#[test]
fn collision_trivial_cases() {
    let ego = straight(0.0);
    assert!(!collides(&ego, &[]));
    assert!(collides(&ego, &[actor_on(&ego, [4.5, 2.0])]));
    // A car one lane over never touches.
    assert!(!collides(&ego, &[actor_on(&straight(3.5), [4.5, 2.0])]));
    // Same path, but the actor is one step ahead the whole time.
    let ahead: Vec<Pose> = (1..=FUTURE_STEPS).map(|t| Pose::new(4.0 * t as f64 + 6.0, 0.0, 0.0)).collect();
    assert!(!collides(&ego, &[actor_on(&ahead, [4.5, 2.0])]));
}

#[test]
fn collision_matches_separating_axis_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut hits = 0;
    for _ in 0..1000 {
        let a = random_box(&mut rng, 4.0);
        let b = random_box(&mut rng, 4.0);
        let want = overlap_oracle(&a, &b);
        hits += want as usize;
        assert_eq!(boxes_overlap(&a, &b), want, "{a:?} {b:?}");
        // Same test routed through the metric: ego box at one waypoint.
        let ego = OrientedBox::at_pose(Pose::new(a.cx, a.cy, a.heading), crate::scene::EGO_LENGTH, crate::scene::EGO_WIDTH);
        let track = vec![Pose::new(b.cx, b.cy, b.heading); FUTURE_STEPS];
        let mut plan = vec![Pose::new(1e3, 1e3, 0.0); FUTURE_STEPS];
        plan[2] = Pose::new(a.cx, a.cy, a.heading);
        assert_eq!(collides(&plan, &[actor_on(&track, [b.length, b.width])]), overlap_oracle(&ego, &b));
    }
    // Both outcomes must be well represented.
    assert!(hits > 200 && hits < 800, "{hits}");
}

fn one_lane() -> Scene {
    Scene::empty(Grid::default(), vec![Lane { centerline: vec![[-30.0, 0.0], [60.0, 0.0]], width: 3.5 }])
}

#[test]
fn lane_violation_trivial_cases() {
    let scene = one_lane();
    assert!(!lane_violation(&scene, &straight(0.0)));
    let across: Vec<Pose> = (1..=FUTURE_STEPS).map(|t| Pose::new(5.0, t as f64, std::f64::consts::FRAC_PI_2)).collect();
    assert!(lane_violation(&scene, &across));
}

#[test]
fn lane_violation_matches_ray_casting_near_boundary() {
    let scene = one_lane();
    let surface = [[-30.0, -1.75], [60.0, -1.75], [60.0, 1.75], [-30.0, 1.75]];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        // Lateral offsets put a box edge within 1 cm of the lane edge.
        let y = 0.75 + rng.gen_range(-0.01..0.01) * if rng.gen() { 1.0 } else { -1.0 };
        let y = if rng.gen() { y } else { -y };
        let th = rng.gen_range(-0.02..0.02);
        let p = Pose::new(rng.gen_range(0.0..20.0), y, th);
        let mut plan = straight(0.0);
        plan[rng.gen_range(0..FUTURE_STEPS)] = p;
        let oracle = ego_box(p).corners().iter().any(|&c| !point_in_polygon(c, &surface));
        assert_eq!(lane_violation(&scene, &plan), oracle, "{p:?}");
    }
}

fn rigid(p: Pose, phi: f64, t: [f64; 2]) -> Pose {
    let (s, c) = phi.sin_cos();
    Pose::new(c * p.x - s * p.y + t[0], s * p.x + c * p.y + t[1], p.theta + phi)
}

fn rigid_pt(q: [f64; 2], phi: f64, t: [f64; 2]) -> [f64; 2] {
    let p = rigid(Pose::new(q[0], q[1], 0.0), phi, t);
    [p.x, p.y]
}

#[test]
fn metrics_invariant_to_rigid_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut seen = [0usize; 2];
    for k in 0..40 {
        let scene = generate_scene(100 + k, Difficulty::Urban);
        let plan: Vec<Pose> = scene
            .ego_future()
            .iter()
            .map(|p| Pose::new(p.x, p.y + rng.gen_range(-8.0..8.0), p.theta + rng.gen_range(-1.0..1.0)))
            .collect();
        let (phi, t) = (rng.gen_range(-3.0..3.0), [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)]);
        let mut moved = scene.clone();
        for lane in &mut moved.lanes {
            lane.centerline.iter_mut().for_each(|q| *q = rigid_pt(*q, phi, t));
        }
        for a in &mut moved.actors {
            a.center = rigid_pt(a.center, phi, t);
            a.heading += phi;
            a.future_track.iter_mut().for_each(|p| *p = rigid(*p, phi, t));
        }
        let moved_plan: Vec<Pose> = plan.iter().map(|&p| rigid(p, phi, t)).collect();
        let c = collides(&plan, &scene.actors);
        let l = lane_violation(&scene, &plan);
        seen[0] += c as usize;
        seen[1] += l as usize;
        assert_eq!(collides(&moved_plan, &moved.actors), c);
        assert_eq!(lane_violation(&moved, &moved_plan), l);
    }
    assert!(seen[1] > 0, "no lane violations exercised");
}

fn det(b: OrientedBox, score: f64) -> Detection {
    Detection { bbox: b, score }
}

#[test]
fn map_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gts: Vec<OrientedBox> = (0..5).map(|k| OrientedBox::new(10.0 * k as f64, 0.0, 4.5, 2.0, 0.3)).collect();
    let perfect = SceneDetections { detections: gts.iter().map(|&b| det(b, 1.0)).collect(), gts: gts.clone() };
    assert_eq!(detection_map(&[perfect]), [1.0; 3]);
    let none = SceneDetections { detections: vec![], gts: gts.clone() };
    assert_eq!(detection_map(&[none]), [0.0; 3]);
    let no_gt = SceneDetections { detections: vec![det(random_box(&mut rng, 5.0), 0.9)], gts: vec![] };
    assert_eq!(detection_map(&[no_gt]), [0.0; 3]);
    // One false positive ranked above all true ones.
    let mut d: Vec<Detection> = gts.iter().map(|&b| det(b, 0.5)).collect();
    d.push(det(OrientedBox::new(100.0, 100.0, 4.5, 2.0, 0.0), 0.9));
    let ap = average_precision(&[SceneDetections { detections: d, gts }], 0.5);
    // Precision at every recall level from 0.2 up is 5/6 or better; level 0
    // also reaches the 5/6 point.
    assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");
}

/// Fresh greedy matching of the `k` best detections for every prefix, and
/// each interpolation level taken as a max over all prefixes.
fn ap_oracle(dets: &[Detection], gts: &[OrientedBox], iou: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut pts = Vec::new();
    for k in 1..=sorted.len() {
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for d in &sorted[..k] {
            let mut best = None;
            let mut best_iou = iou;
            for (g, gt) in gts.iter().enumerate() {
                let v = rotated_iou(&d.bbox, gt);
                if !used[g] && v >= best_iou && best.map_or(true, |_| v > best_iou) {
                    best = Some(g);
                    best_iou = v;
                }
            }
            if let Some(g) = best {
                used[g] = true;
                tp += 1;
            }
        }
        pts.push((tp as f64 / gts.len() as f64, tp as f64 / k as f64));
    }
    let mut sum = 0.0;
    for r in 0..=10 {
        let mut m: f64 = 0.0;
        for &(rec, prec) in &pts {
            if rec >= r as f64 / 10.0 - 1e-12 {
                m = m.max(prec);
            }
        }
        sum += m;
    }
    sum / 11.0
}

#[test]
fn map_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..1000 {
        let gts: Vec<OrientedBox> = (0..rng.gen_range(1..10)).map(|_| random_box(&mut rng, 6.0)).collect();
        let mut dets: Vec<Detection> = Vec::new();
        for _ in 0..20 {
            let b = if rng.gen_bool(0.6) {
                // Jittered copy of some ground truth.
                let g = gts[rng.gen_range(0..gts.len())];
                OrientedBox::new(
                    g.cx + rng.gen_range(-0.6..0.6),
                    g.cy + rng.gen_range(-0.6..0.6),
                    g.length * rng.gen_range(0.8..1.2),
                    g.width * rng.gen_range(0.8..1.2),
                    g.heading + rng.gen_range(-0.3..0.3),
                )
            } else {
                random_box(&mut rng, 6.0)
            };
            dets.push(det(b, rng.gen()));
        }
        let scene = SceneDetections { detections: dets.clone(), gts: gts.clone() };
        for iou in IOU_THRESHOLDS {
            let got = average_precision(std::slice::from_ref(&scene), iou);
            assert!((got - ap_oracle(&dets, &gts, iou)).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&got));
        }
    }
}

#[test]
fn map_is_order_independent_across_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut scenes: Vec<SceneDetections> = (0..8)
        .map(|_| {
            let gts: Vec<OrientedBox> = (0..4).map(|_| random_box(&mut rng, 6.0)).collect();
            let detections = gts.iter().map(|&g| det(OrientedBox { cx: g.cx + rng.gen_range(-0.5..0.5), ..g }, rng.gen())).collect();
            SceneDetections { detections, gts }
        })
        .collect();
    let a = detection_map(&scenes);
    scenes.reverse();
    assert_eq!(a, detection_map(&scenes));
}

#[test]
fn dropping_unmatched_ground_truth_never_lowers_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let mut gts: Vec<OrientedBox> = (0..6).map(|k| OrientedBox::new(8.0 * k as f64, 0.0, 4.5, 2.0, 0.0)).collect();
        let mut dets: Vec<Detection> =
            gts[..3].iter().map(|g| det(OrientedBox { cx: g.cx + rng.gen_range(-0.3..0.3), ..*g }, rng.gen())).collect();
        for _ in 0..3 {
            dets.push(det(OrientedBox::new(rng.gen_range(60.0..90.0), 20.0, 4.5, 2.0, 0.0), rng.gen()));
        }
        let before = average_precision(&[SceneDetections { detections: dets.clone(), gts: gts.clone() }], 0.5);
        gts.truncate(3 + rng.gen_range(0..3));
        let after = average_precision(&[SceneDetections { detections: dets, gts }], 0.5);
        assert!(after >= before - 1e-12, "{before} -> {after}");
    }
}

#[test]
fn attended_region_is_subset_of_full() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for k in 0..30 {
        let scene = generate_scene(200 + k, Difficulty::Dense);
        let (h, w) = (scene.grid.rows().unwrap() / 4, scene.grid.cols().unwrap() / 4);
        let data = (0..h * w).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let mask = AttentionMask::from_hard(Tensor::from_vec(&[1, 1, h, w], data).unwrap()).unwrap();
        let dets: Vec<Detection> = scene.actors.iter().map(|a| det(a.bbox(), rng.gen())).collect();
        let full = SceneDetections::from_scene(&scene, dets);
        for rule in [Membership::CenterCell, Membership::AnyOverlap] {
            let att = full.restrict(&mask, &scene.grid, rule);
            assert!(att.gts.iter().all(|g| full.gts.contains(g)));
            assert!(att.detections.iter().all(|d| full.detections.contains(d)));
        }
        // Center membership implies overlap membership.
        let c = full.restrict(&mask, &scene.grid, Membership::CenterCell);
        let o = full.restrict(&mask, &scene.grid, Membership::AnyOverlap);
        assert!(c.gts.iter().all(|g| o.gts.contains(g)));
        let dense = AttentionMask::dense(h, w);
        assert_eq!(full.restrict(&dense, &scene.grid, Membership::CenterCell).gts.len(), scene.actors.len());
        if let Some(cov) = attended_coverage(&dense, &scene, Membership::CenterCell) {
            assert_eq!(cov, 1.0);
        }
    }
}

#[test]
fn decode_inverts_label_encoding_and_nms_dedups() {
    let grid = Grid::default();
    let (h, w) = (24, 24);
    let mut scores = Tensor::<f32>::zeros(&[1, 1, h, w]);
    let mut reg = Tensor::<f32>::zeros(&[1, 6, h, w]);
    let target = OrientedBox::new(10.3, -4.2, 4.8, 1.9, 0.4);
    for (i, j, s) in [(5usize, 9usize, 0.9f32), (5, 10, 0.8), (20, 2, 0.5 * SCORE_THRESHOLD as f32)] {
        scores.set4(0, 0, i, j, s);
        let d = encode_delta(&anchor_at(&grid, i, j), &target);
        for (c, v) in d.iter().enumerate() {
            reg.set4(0, c, i, j, *v as f32);
        }
    }
    let dets = decode_detections(&scores, &reg, &grid, SCORE_THRESHOLD).unwrap();
    assert_eq!(dets.len(), 2);
    for d in &dets {
        assert!(rotated_iou(&d.bbox, &target) > 0.999);
    }
    let kept = nms(dets, NMS_IOU);
    assert_eq!(kept.len(), 1);
    assert!((kept[0].score - 0.9).abs() < 1e-6);
    assert!(decode_detections(&scores, &Tensor::<f32>::zeros(&[1, 6, h, w + 1]), &grid, 0.5).is_err());
}

fn report(label: &str) -> MetricsReport {
    MetricsReport {
        label: label.into(),
        scenes: 10,
        sparsity: 0.95,
        flops: 5_220_000_000,
        planning_l2_at_3s: 2.102,
        collision_rate_over_3s: 10.0,
        lane_violation_over_3s: 20.0,
        map_full: [0.9, 0.8, 0.5],
        map_attended: [0.95, 0.85, 0.6],
    }
}

#[test]
fn report_csv_and_table() {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &[report("learned"), report("dense")]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("label,scenes,sparsity,flops,l2_3s,collision_pct"));
    assert!(lines[1].starts_with("learned,10,0.9500,5220000000,2.1020,10.0000,20.0000"));
    let table = metrics_table(&[report("learned")]);
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("Model"));
    assert!(rows[2].contains("95.0") && rows[2].contains("5.220") && rows[2].contains("2.102"));
}

#[test]
fn aggregate_folds_scene_results() {
    let scene = one_lane();
    let mask = AttentionMask::dense(24, 24);
    let on_lane = SceneEval::new(&scene, &scene.ego_future().to_vec(), vec![], &mask, Membership::CenterCell).unwrap();
    let off: Vec<Pose> = scene.ego_future().iter().map(|p| Pose::new(p.x, p.y + 3.0, p.theta)).collect();
    let off_lane = SceneEval::new(&scene, &off, vec![], &mask, Membership::CenterCell).unwrap();
    let r = MetricsReport::aggregate("x", &[on_lane.clone(), off_lane.clone()], 7);
    assert_eq!(r.scenes, 2);
    assert!((r.planning_l2_at_3s - 1.5).abs() < 1e-12);
    assert_eq!(r.lane_violation_over_3s, 50.0);
    assert_eq!(r.collision_rate_over_3s, 0.0);
    assert_eq!(r.sparsity, 0.0);
    assert_eq!(r, MetricsReport::aggregate("x", &[off_lane, on_lane], 7));
}

proptest! {
    #[test]
    fn rates_stay_in_range(flags in proptest::collection::vec(any::<bool>(), 0..50)) {
        let p = percent(&flags);
        prop_assert!((0.0..=100.0).contains(&p));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_box(&mut rng, 3.0), random_box(&mut rng, 3.0));
        let (x, y) = (rotated_iou(&a, &b), rotated_iou(&b, &a));
        prop_assert!((x - y).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
        prop_assert!(x == 0.0 || boxes_overlap(&a, &b));
    }
}
