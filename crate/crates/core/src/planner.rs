//! Trajectory sampling and minimum-cost selection under a cost volume.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose};
use crate::nn::{Real, Tensor};
use crate::scene::{ego_box, Grid, Scene, FUTURE_STEPS, STEP_DT, SWEEP_DT};

/// Family of the generating curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Straight,
    Circle,
    Clothoid,
}

/// Kinematic bounds on sampled trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub v_max: f64,
    pub kappa_max: f64,
    pub accel_max: f64,
    /// Caps `v^2 |kappa|` on top of `kappa_max`.
    pub lateral_accel_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { v_max: 15.0, kappa_max: 0.2, accel_max: 3.0, lateral_accel_max: 4.0 }
    }
}

/// What to charge for a waypoint outside the cost volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffGrid {
    /// Read the nearest border cell.
    Clamp,
    /// Charge a fixed cost.
    Penalty(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub samples: usize,
    /// Probabilities of clothoid and circle samples; straight takes the rest.
    pub clothoid_share: f64,
    pub circle_share: f64,
    pub limits: Limits,
    pub off_grid: OffGrid,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            samples: 200,
            clothoid_share: 0.4,
            circle_share: 0.3,
            limits: Limits::default(),
            off_grid: OffGrid::Clamp,
        }
    }
}

/// Ego state at planning time; the pose is the ego frame origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoState {
    pub speed: f64,
}

impl EgoState {
    /// Speed from the last two past poses.
    pub fn from_scene(scene: &Scene) -> Self {
        let (a, b) = (scene.ego_at_sweep(1), scene.ego_at_sweep(0));
        EgoState { speed: (b.x - a.x).hypot(b.y - a.y) / SWEEP_DT }
    }
}

/// A sampled trajectory and the curve that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub kind: CurveKind,
    pub v0: f64,
    pub accel: f64,
    pub kappa0: f64,
    /// Curvature change per metre of arc.
    pub kappa_rate: f64,
    /// Poses at `t = 1..=T`.
    pub waypoints: Vec<Pose>,
}

/// Distance travelled after `t` seconds from speed `v0` under constant
/// acceleration, with speed held in `[0, v_max]`.
pub fn arc_length(v0: f64, accel: f64, v_max: f64, t: f64) -> f64 {
    let v0 = v0.clamp(0.0, v_max);
    let limit = if accel > 0.0 {
        (v_max - v0) / accel
    } else if accel < 0.0 {
        v0 / -accel
    } else {
        f64::INFINITY
    };
    if t <= limit {
        v0 * t + 0.5 * accel * t * t
    } else {
        let s1 = v0 * limit + 0.5 * accel * limit * limit;
        let v1 = if accel > 0.0 { v_max } else { 0.0 };
        s1 + v1 * (t - limit)
    }
}

/// Simpson panels per clothoid segment.
const SIMPSON_PANELS: usize = 512;

/// Integrates the clothoid from arc `s0` to `s1` starting at `from`.
fn integrate_clothoid(from: Pose, kappa0: f64, rate: f64, s0: f64, s1: f64) -> Pose {
    let theta = |s: f64| kappa0 * s + 0.5 * rate * s * s;
    let h = (s1 - s0) / SIMPSON_PANELS as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for k in 0..=SIMPSON_PANELS {
        let w = if k == 0 || k == SIMPSON_PANELS {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let th = theta(s0 + k as f64 * h);
        cx += w * th.cos();
        cy += w * th.sin();
    }
    Pose::new(from.x + cx * h / 3.0, from.y + cy * h / 3.0, wrap_angle(theta(s1)))
}

/// Pose at arc length `s` of a curve leaving the origin along +x with
/// curvature `kappa0 + rate * s`.
pub fn curve_point(kappa0: f64, rate: f64, s: f64) -> Pose {
    if rate != 0.0 {
        return integrate_clothoid(Pose::new(0.0, 0.0, 0.0), kappa0, rate, 0.0, s);
    }
    if kappa0 == 0.0 {
        return Pose::new(s, 0.0, 0.0);
    }
    let th = kappa0 * s;
    let half = (0.5 * th).sin();
    Pose::new(th.sin() / kappa0, 2.0 * half * half / kappa0, wrap_angle(th))
}

impl Trajectory {
    /// Waypoints of the given curve at the planning timestamps.
    pub fn generate(kind: CurveKind, v0: f64, accel: f64, kappa0: f64, kappa_rate: f64, limits: &Limits) -> Self {
        let (kappa0, kappa_rate) = match kind {
            CurveKind::Straight => (0.0, 0.0),
            CurveKind::Circle => (kappa0, 0.0),
            CurveKind::Clothoid => (kappa0, kappa_rate),
        };
        let mut waypoints = Vec::with_capacity(FUTURE_STEPS);
        let (mut prev, mut s_prev) = (Pose::new(0.0, 0.0, 0.0), 0.0);
        for t in 1..=FUTURE_STEPS {
            let s = arc_length(v0, accel, limits.v_max, t as f64 * STEP_DT);
            let p = if kappa_rate != 0.0 {
                // Continue from the previous waypoint so each segment is short.
                integrate_clothoid(prev, kappa0, kappa_rate, s_prev, s)
            } else {
                curve_point(kappa0, 0.0, s)
            };
            waypoints.push(p);
            prev = p;
            s_prev = s;
        }
        Trajectory { kind, v0, accel, kappa0, kappa_rate, waypoints }
    }

    /// Arc length covered by the last waypoint.
    pub fn length(&self, limits: &Limits) -> f64 {
        arc_length(self.v0, self.accel, limits.v_max, FUTURE_STEPS as f64 * STEP_DT)
    }

    /// Largest `|kappa|` along the generated arc.
    pub fn max_curvature(&self, limits: &Limits) -> f64 {
        let end = self.kappa0 + self.kappa_rate * self.length(limits);
        self.kappa0.abs().max(end.abs())
    }
}

/// Draws `n` trajectories from the configured curve mixture.
pub fn sample_trajectories<R: Rng>(state: EgoState, n: usize, config: &PlannerConfig, rng: &mut R) -> Vec<Trajectory> {
    let lim = &config.limits;
    let v0 = state.speed.clamp(0.0, lim.v_max);
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            let kind = if u < config.clothoid_share {
                CurveKind::Clothoid
            } else if u < config.clothoid_share + config.circle_share {
                CurveKind::Circle
            } else {
                CurveKind::Straight
            };
            let accel = rng.gen_range(-lim.accel_max..=lim.accel_max);
            let horizon = FUTURE_STEPS as f64 * STEP_DT;
            let s_end = arc_length(v0, accel, lim.v_max, horizon);
            let v_peak = v0.max((v0 + accel * horizon).clamp(0.0, lim.v_max));
            let k_lim = if v_peak > 0.0 {
                lim.kappa_max.min(lim.lateral_accel_max / (v_peak * v_peak))
            } else {
                lim.kappa_max
            };
            let kappa0 = rng.gen_range(-k_lim..=k_lim);
            let kappa_end: f64 = rng.gen_range(-k_lim..=k_lim);
            let rate = if kind == CurveKind::Clothoid && s_end > 1e-9 { (kappa_end - kappa0) / s_end } else { 0.0 };
            let kappa0 = if kind == CurveKind::Straight { 0.0 } else { kappa0 };
            Trajectory::generate(kind, v0, accel, kappa0, rate, lim)
        })
        .collect()
}

/// Bilinear lookup of plane `t` of `c: [1, T, H, W]` (or `[T, H, W]`) at
/// continuous cell coordinates, clamped to the grid.
pub fn bilinear<T: Real>(c: &Tensor<T>, t: usize, row: f64, col: f64) -> f64 {
    let s = c.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let plane = &c.data()[t * h * w..(t + 1) * h * w];
    let r = row.clamp(0.0, (h - 1) as f64);
    let q = col.clamp(0.0, (w - 1) as f64);
    let (r0, q0) = (r.floor() as usize, q.floor() as usize);
    let (r1, q1) = ((r0 + 1).min(h - 1), (q0 + 1).min(w - 1));
    let (fr, fq) = (r - r0 as f64, q - q0 as f64);
    let at = |i: usize, j: usize| plane[i * w + j].f64();
    at(r0, q0) * (1.0 - fr) * (1.0 - fq) + at(r0, q1) * (1.0 - fr) * fq + at(r1, q0) * fr * (1.0 - fq) + at(r1, q1) * fr * fq
}

fn check_volume<T: Real>(c: &Tensor<T>) -> Result<()> {
    let s = c.shape();
    let planes = s.len().checked_sub(3).map(|k| s[k]);
    if s.len() < 3 || planes != Some(FUTURE_STEPS) || s[..s.len() - 3].iter().any(|&d| d != 1) {
        return Err(Error::shape("evaluate_cost", format!("cost volume shape {s:?}")));
    }
    Ok(())
}

/// Per-step costs `C[t, x_t, y_t]` of a waypoint sequence.
pub fn waypoint_costs<T: Real>(waypoints: &[Pose], c: &Tensor<T>, grid: &Grid, off_grid: OffGrid) -> Result<Vec<f64>> {
    check_volume(c)?;
    if waypoints.len() != FUTURE_STEPS {
        return Err(Error::invalid(format!("{} waypoints, expected {FUTURE_STEPS}", waypoints.len())));
    }
    Ok(waypoints
        .iter()
        .enumerate()
        .map(|(t, p)| match off_grid {
            OffGrid::Penalty(v) if !grid.contains([p.x, p.y]) => v,
            _ => {
                let (r, q) = grid.to_cell_coords([p.x, p.y]);
                bilinear(c, t, r, q)
            }
        })
        .collect())
}

/// Sum of the per-step costs.
pub fn evaluate_cost<T: Real>(traj: &Trajectory, c: &Tensor<T>, grid: &Grid, off_grid: OffGrid) -> Result<f64> {
    Ok(waypoint_costs(&traj.waypoints, c, grid, off_grid)?.iter().sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    pub index: usize,
    pub trajectory: Trajectory,
    pub cost: f64,
    pub costs: Vec<f64>,
}

/// Lowest-cost trajectory; ties go to the lowest index.
pub fn select<T: Real>(trajectories: &[Trajectory], c: &Tensor<T>, grid: &Grid, off_grid: OffGrid) -> Result<PlanResult> {
    if trajectories.is_empty() {
        return Err(Error::invalid("no trajectories to select from"));
    }
    let costs = trajectories
        .iter()
        .map(|tr| evaluate_cost(tr, c, grid, off_grid))
        .collect::<Result<Vec<_>>>()?;
    let mut index = 0;
    for (i, &v) in costs.iter().enumerate() {
        if v < costs[index] {
            index = i;
        }
    }
    Ok(PlanResult { index, trajectory: trajectories[index].clone(), cost: costs[index], costs })
}

/// Samples and selects in one call.
pub fn plan<T: Real, R: Rng>(
    state: EgoState,
    c: &Tensor<T>,
    grid: &Grid,
    config: &PlannerConfig,
    rng: &mut R,
) -> Result<PlanResult> {
    let samples = sample_trajectories(state, config.samples, config, rng);
    select(&samples, c, grid, config.off_grid)
}

/// True when some corner of the ego box at `pose` leaves the lanes.
pub fn off_road(scene: &Scene, pose: Pose) -> bool {
    ego_box(pose).corners().iter().any(|&p| !scene.drivable(p))
}

/// Writes `t, x, y, theta, cost_t` rows for a planned trajectory.
pub fn write_trajectory_csv<W: Write, T: Real>(
    w: W,
    waypoints: &[Pose],
    c: &Tensor<T>,
    grid: &Grid,
    off_grid: OffGrid,
) -> Result<()> {
    let costs = waypoint_costs(waypoints, c, grid, off_grid)?;
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["t", "x", "y", "theta", "cost_t"])?;
    for (k, (p, cost)) in waypoints.iter().zip(costs).enumerate() {
        let t = (k + 1) as f64 * STEP_DT;
        wr.write_record([t, p.x, p.y, p.theta, cost].map(|v| format!("{v}")))?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_trajectory_csv<T: Real>(path: &Path, waypoints: &[Pose], c: &Tensor<T>, grid: &Grid, off_grid: OffGrid) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trajectory_csv(f, waypoints, c, grid, off_grid)
}
