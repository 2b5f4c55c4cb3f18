use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{boxes_overlap, wrap_angle};

const ROAD_BEHIND: f64 = 40.0;
const ROAD_AHEAD: f64 = 70.0;
const ROAD_STEP: f64 = 1.0;
const EGO_CLEARANCE: f64 = 1.0;
const V_MAX: f64 = 15.0;
const A_MAX: f64 = 3.0;

/// Scene on the default grid.
pub fn generate_scene(seed: u64, difficulty: Difficulty) -> Scene {
    generate_scene_in(seed, difficulty, Grid::default())
}

/// Scene whose actors are placed inside `grid`.
pub fn generate_scene_in(seed: u64, difficulty: Difficulty, grid: Grid) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lanes, ego_lane, ego_arc, shoulders) = build_roads(&mut rng, difficulty, &grid);
    let mut placed = Vec::new();
    place_actors(&mut rng, difficulty, &grid, &lanes, &shoulders, &mut placed);
    let ego_track = ego_track(&mut rng, &lanes[ego_lane], ego_arc, ego_lane, &placed);
    // The logged ego never collides: drop actors whose tracks cross its path.
    let future = &ego_track[PAST_SWEEPS..];
    placed.retain(|p| {
        future.iter().enumerate().all(|(k, &e)| !boxes_overlap(&ego_box(e), &p.actor.box_at_step(k + 1)))
    });
    Scene {
        seed,
        difficulty,
        grid,
        ego_lane,
        ego_track,
        lanes,
        actors: placed.into_iter().map(|p| p.actor).collect(),
    }
}

fn arc_point(kappa: f64, s: f64) -> (Point, f64) {
    if kappa.abs() < 1e-9 {
        ([s, 0.0], 0.0)
    } else {
        let th = kappa * s;
        ([th.sin() / kappa, (1.0 - th.cos()) / kappa], th)
    }
}

/// Main road as a constant-curvature arc through the origin, plus an
/// optional straight cross road. Returns lanes, the ego lane index, the ego
/// arc position, and parking shoulders.
fn build_roads(rng: &mut ChaCha8Rng, d: Difficulty, grid: &Grid) -> (Vec<Lane>, usize, f64, Vec<Lane>) {
    let kappa = rng.gen_range(-0.008..0.008);
    let (fwd, back, cross) = match d {
        Difficulty::Sparse => (1, 1, 0),
        Difficulty::Urban => (2, 1, 1),
        Difficulty::Dense => (2, 2, 2),
    };
    let n = ((ROAD_BEHIND + ROAD_AHEAD) / ROAD_STEP) as usize;
    let offset_line = |off: f64| -> Vec<Point> {
        (0..=n)
            .map(|k| {
                let s = -ROAD_BEHIND + k as f64 * ROAD_STEP;
                let (p, th) = arc_point(kappa, s);
                [p[0] - off * th.sin(), p[1] + off * th.cos()]
            })
            .collect()
    };
    let mut lanes = Vec::new();
    for k in 0..fwd {
        lanes.push(Lane { centerline: offset_line(-LANE_WIDTH * k as f64), width: LANE_WIDTH });
    }
    for k in 0..back {
        let mut line = offset_line(LANE_WIDTH * (k + 1) as f64);
        line.reverse();
        lanes.push(Lane { centerline: line, width: LANE_WIDTH });
    }
    let park_off = LANE_WIDTH / 2.0 + 1.3;
    let shoulders = vec![
        Lane { centerline: offset_line(-LANE_WIDTH * (fwd - 1) as f64 - park_off), width: 0.0 },
        Lane { centerline: offset_line(LANE_WIDTH * back as f64 + park_off), width: 0.0 },
    ];
    if cross > 0 {
        let xc = rng.gen_range(grid.x_min + 0.45 * grid.length..grid.x_min + 0.8 * grid.length);
        let ys = (grid.y_min - 20.0, grid.y_max() + 20.0);
        let steps = ((ys.1 - ys.0) / ROAD_STEP) as usize;
        for k in 0..cross {
            let off = LANE_WIDTH / 2.0 + LANE_WIDTH * k as f64;
            let up: Vec<Point> = (0..=steps).map(|i| [xc - off, ys.0 + i as f64 * ROAD_STEP]).collect();
            let down: Vec<Point> = (0..=steps).rev().map(|i| [xc + off, ys.0 + i as f64 * ROAD_STEP]).collect();
            lanes.push(Lane { centerline: up, width: LANE_WIDTH });
            lanes.push(Lane { centerline: down, width: LANE_WIDTH });
        }
    }
    (lanes, 0, ROAD_BEHIND, shoulders)
}

struct Placed {
    actor: Actor,
    lane: Option<usize>,
    arc: f64,
    speed: f64,
}

fn track_along(lane: &Lane, arc: f64, speed: f64) -> (Vec<Pose>, Vec<Pose>) {
    let future = (1..=FUTURE_STEPS).map(|k| lane.pose_at(arc + speed * STEP_DT * k as f64)).collect();
    let past = (0..PAST_SWEEPS).map(|k| lane.pose_at(arc - speed * SWEEP_DT * k as f64)).collect();
    (future, past)
}

fn place_actors(
    rng: &mut ChaCha8Rng,
    d: Difficulty,
    grid: &Grid,
    lanes: &[Lane],
    shoulders: &[Lane],
    placed: &mut Vec<Placed>,
) {
    let (lo, hi) = d.actor_range();
    let target = rng.gen_range(lo..=hi);
    let parked_share = match d {
        Difficulty::Sparse => 0.2,
        Difficulty::Urban => 0.25,
        Difficulty::Dense => 0.3,
    };
    let ego = OrientedBox::new(0.0, 0.0, EGO_LENGTH + 2.0 * EGO_CLEARANCE, EGO_WIDTH + EGO_CLEARANCE, 0.0);
    let margin = 1.0;
    let mut attempts = 0;
    while placed.len() < target && attempts < 400 * target {
        attempts += 1;
        let parked = rng.gen_bool(parked_share);
        let (lane_idx, lane) = if parked {
            let k = rng.gen_range(0..shoulders.len());
            (None, &shoulders[k])
        } else {
            let k = rng.gen_range(0..lanes.len());
            (Some(k), &lanes[k])
        };
        let arc = rng.gen_range(0.0..lane.arc_length());
        let speed = if parked { 0.0 } else { rng.gen_range(2.0..12.0) };
        let size = [rng.gen_range(4.0..5.2), rng.gen_range(1.8..2.2)];
        let mut pose = lane.pose_at(arc);
        if parked && rng.gen_bool(0.5) {
            pose.theta = wrap_angle(pose.theta + std::f64::consts::PI);
        }
        let inside = pose.x > grid.x_min + margin
            && pose.x < grid.x_max() - margin
            && pose.y > grid.y_min + margin
            && pose.y < grid.y_max() - margin;
        if !inside {
            continue;
        }
        let bbox = OrientedBox::at_pose(pose, size[0], size[1]);
        if boxes_overlap(&bbox, &ego) || placed.iter().any(|p| boxes_overlap(&bbox, &p.actor.bbox())) {
            continue;
        }
        let (future_track, past_track) = if parked {
            (vec![pose; FUTURE_STEPS], vec![pose; PAST_SWEEPS])
        } else {
            track_along(lane, arc, speed)
        };
        let actor = Actor {
            kind: if parked { ActorKind::Parked } else { ActorKind::Vehicle },
            center: [pose.x, pose.y],
            size,
            heading: wrap_angle(pose.theta),
            future_track,
            past_track,
        };
        placed.push(Placed { actor, lane: lane_idx, arc, speed });
    }
}

/// Constant-speed past and car-following future along the ego lane.
fn ego_track(rng: &mut ChaCha8Rng, lane: &Lane, arc0: f64, ego_lane: usize, placed: &[Placed]) -> Vec<Pose> {
    let v0: f64 = rng.gen_range(3.0..11.0);
    let leader = placed
        .iter()
        .filter(|p| p.lane == Some(ego_lane) && p.arc > arc0)
        .min_by(|a, b| a.arc.total_cmp(&b.arc));

    let mut track: Vec<Pose> = (0..PAST_SWEEPS)
        .rev()
        .map(|k| lane.pose_at(arc0 - v0 * SWEEP_DT * k as f64))
        .collect();
    track[PAST_SWEEPS - 1] = Pose::new(0.0, 0.0, 0.0);
    let (a_max, b_comf, s0, headway) = (1.5, 2.0, 2.0, 1.5);
    let dt = 0.05;
    let (mut s, mut v, mut t) = (0.0, v0, 0.0);
    let per_step = (STEP_DT / dt).round() as usize;
    for _ in 0..FUTURE_STEPS {
        for _ in 0..per_step {
            let mut acc = a_max * (1.0 - (v / v0).powi(4));
            if let Some(l) = leader {
                let lead_pos = l.arc - arc0 + l.speed * t;
                let gap = (lead_pos - s - (l.actor.size[0] + EGO_LENGTH) / 2.0).max(0.1);
                let want = s0 + v * headway + v * (v - l.speed) / (2.0 * (a_max * b_comf).sqrt());
                acc -= a_max * (want.max(0.0) / gap).powi(2);
            }
            let acc = acc.clamp(-A_MAX, A_MAX);
            let v_next = (v + acc * dt).clamp(0.0, V_MAX);
            s += (v + v_next) / 2.0 * dt;
            v = v_next;
            t += dt;
        }
        track.push(lane.pose_at(arc0 + s));
    }
    track.iter_mut().for_each(|p| p.theta = wrap_angle(p.theta));
    track
}
