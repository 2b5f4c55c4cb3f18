//! Procedural toy driving worlds and their bird's-eye-view rasterization.
//!
//! Everything is expressed in the ego frame at `t = 0`: the ego vehicle sits
//! at the origin heading along `+x`. Grid row `i` runs along `x`, column `j`
//! along `y`.

mod generate;
mod io;
mod lidar;
mod raster;

pub use generate::{generate_scene, generate_scene_in};
pub use io::{load_scene, save_scene, SCENE_MAGIC};
pub use lidar::{simulate_lidar, LidarPoint, LIDAR_RAYS, LIDAR_RANGE};
pub use raster::{
    anchor_at, decode_delta, encode_delta, height_slice, lane_surface, rasterize, rasterize_labels, rasterize_points, BevInput,
    Labels, BEV_MAGIC, REG_CHANNELS,
};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{point_segment_distance, OrientedBox, Point, Pose};

/// Number of past LiDAR sweeps stacked in the input.
pub const PAST_SWEEPS: usize = 10;
/// Seconds between past sweeps.
pub const SWEEP_DT: f64 = 0.1;
/// Number of future planning steps.
pub const FUTURE_STEPS: usize = 6;
/// Seconds between future steps.
pub const STEP_DT: f64 = 0.5;
/// Height slices per sweep.
pub const HEIGHT_SLICES: usize = 3;
/// Upper edges of the lower height slices, in meters.
pub const SLICE_EDGES: [f64; 2] = [0.2, 1.0];
/// Map channels: lane surface, lane centerline, ego route.
pub const MAP_CHANNELS: usize = 3;
/// Input channel count.
pub const INPUT_CHANNELS: usize = HEIGHT_SLICES * PAST_SWEEPS + MAP_CHANNELS;
/// Downsampling between the input grid and the detection/attention grid.
pub const FEATURE_STRIDE: usize = 4;

pub const ANCHOR_LENGTH: f64 = 4.5;
pub const ANCHOR_WIDTH: f64 = 2.0;
pub const EGO_LENGTH: f64 = 4.5;
pub const EGO_WIDTH: f64 = 2.0;
pub const LANE_WIDTH: f64 = 3.5;

/// Metric extent and resolution of the BEV grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_min: f64,
    pub y_min: f64,
    /// Extent along `x` in meters.
    pub length: f64,
    /// Extent along `y` in meters.
    pub width: f64,
    /// Meters per cell.
    pub resolution: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Grid { x_min: -12.0, y_min: -24.0, length: 48.0, width: 48.0, resolution: 0.5 }
    }
}

fn cells(extent: f64, res: f64, what: &str) -> Result<usize> {
    if !(res > 0.0) || !(extent > 0.0) {
        return Err(Error::invalid(format!("grid {what} {extent} m at {res} m/cell")));
    }
    let n = extent / res;
    let r = n.round();
    if (n - r).abs() > 1e-9 || r < 1.0 {
        return Err(Error::invalid(format!(
            "resolution {res} m does not evenly divide grid {what} {extent} m"
        )));
    }
    Ok(r as usize)
}

impl Grid {
    /// Grid covering the default extent at a different cell count.
    pub fn square(cells: usize) -> Self {
        Grid { resolution: 48.0 / cells as f64, ..Grid::default() }
    }

    pub fn rows(&self) -> Result<usize> {
        cells(self.length, self.resolution, "length")
    }

    pub fn cols(&self) -> Result<usize> {
        cells(self.width, self.resolution, "width")
    }

    /// `(rows, cols)` after checking that the detection grid divides evenly.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let (h, w) = (self.rows()?, self.cols()?);
        if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
            return Err(Error::invalid(format!("grid {h}x{w} not divisible by {FEATURE_STRIDE}")));
        }
        Ok((h, w))
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.length
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.width
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x_min && p[0] < self.x_max() && p[1] >= self.y_min && p[1] < self.y_max()
    }

    /// Cell containing `p` on a grid `scale` times coarser than this one.
    pub fn cell_of_scaled(&self, p: Point, scale: usize) -> Option<(usize, usize)> {
        if !self.contains(p) {
            return None;
        }
        let r = self.resolution * scale as f64;
        let i = ((p[0] - self.x_min) / r).floor() as usize;
        let j = ((p[1] - self.y_min) / r).floor() as usize;
        let (h, w) = (self.rows().ok()? / scale, self.cols().ok()? / scale);
        (i < h && j < w).then_some((i, j))
    }

    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        self.cell_of_scaled(p, 1)
    }

    /// Center of cell `(i, j)` on a grid `scale` times coarser.
    pub fn cell_center_scaled(&self, i: usize, j: usize, scale: usize) -> Point {
        let r = self.resolution * scale as f64;
        [self.x_min + (i as f64 + 0.5) * r, self.y_min + (j as f64 + 0.5) * r]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Point {
        self.cell_center_scaled(i, j, 1)
    }

    /// Continuous `(row, col)` coordinates with cell centers at integers.
    pub fn to_cell_coords(&self, p: Point) -> (f64, f64) {
        (
            (p[0] - self.x_min) / self.resolution - 0.5,
            (p[1] - self.y_min) / self.resolution - 0.5,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Sparse,
    Urban,
    Dense,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Sparse, Difficulty::Urban, Difficulty::Dense];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Sparse => "sparse",
            Difficulty::Urban => "urban",
            Difficulty::Dense => "dense",
        }
    }

    /// Inclusive range of actor counts the generator aims for.
    pub fn actor_range(self) -> (usize, usize) {
        match self {
            Difficulty::Sparse => (1, 5),
            Difficulty::Urban => (6, 20),
            Difficulty::Dense => (20, 40),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Difficulty::Sparse),
            "urban" => Ok(Difficulty::Urban),
            "dense" => Ok(Difficulty::Dense),
            _ => Err(Error::Config(format!("unknown difficulty {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActorKind {
    Vehicle,
    Parked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub kind: ActorKind,
    pub center: Point,
    /// `[length, width]` in meters.
    pub size: [f64; 2],
    pub heading: f64,
    /// Poses at `t = STEP_DT * k` for `k = 1..=FUTURE_STEPS`.
    pub future_track: Vec<Pose>,
    /// Poses at `t = -SWEEP_DT * k` for `k = 0..PAST_SWEEPS`.
    pub past_track: Vec<Pose>,
}

impl Actor {
    pub fn pose(&self) -> Pose {
        Pose::new(self.center[0], self.center[1], self.heading)
    }

    pub fn bbox(&self) -> OrientedBox {
        OrientedBox::at_pose(self.pose(), self.size[0], self.size[1])
    }

    /// Box at future step `t`, where step 0 is the current pose.
    pub fn box_at_step(&self, t: usize) -> OrientedBox {
        let p = if t == 0 { self.pose() } else { self.future_track[t - 1] };
        OrientedBox::at_pose(p, self.size[0], self.size[1])
    }

    pub fn box_at_sweep(&self, k: usize) -> OrientedBox {
        OrientedBox::at_pose(self.past_track[k], self.size[0], self.size[1])
    }
}

/// Lane as a directed centerline with constant width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub centerline: Vec<Point>,
    pub width: f64,
}

impl Lane {
    /// True when `p` lies on the lane surface.
    pub fn contains(&self, p: Point) -> bool {
        self.distance(p) <= self.width / 2.0
    }

    pub fn distance(&self, p: Point) -> f64 {
        self.centerline
            .windows(2)
            .map(|s| point_segment_distance(p, s[0], s[1]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn arc_length(&self) -> f64 {
        self.centerline.windows(2).map(|s| (s[1][0] - s[0][0]).hypot(s[1][1] - s[0][1])).sum()
    }

    /// Pose at arc length `s` from the first vertex, extrapolating linearly
    /// past either end.
    pub fn pose_at(&self, s: f64) -> Pose {
        let pts = &self.centerline;
        let mut acc = 0.0;
        let last = pts.len() - 2;
        for (k, seg) in pts.windows(2).enumerate() {
            let (dx, dy) = (seg[1][0] - seg[0][0], seg[1][1] - seg[0][1]);
            let len = dx.hypot(dy);
            if s <= acc + len || k == last {
                let u = s - acc;
                let (c, sn) = (dx / len, dy / len);
                return Pose::new(seg[0][0] + u * c, seg[0][1] + u * sn, dy.atan2(dx));
            }
            acc += len;
        }
        unreachable!("lane with fewer than two vertices")
    }
}

/// One synthetic driving scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub grid: Grid,
    /// Index into `lanes` of the lane the ego drives in.
    pub ego_lane: usize,
    /// `PAST_SWEEPS` past poses oldest first (the last is the origin),
    /// followed by `FUTURE_STEPS` future poses.
    pub ego_track: Vec<Pose>,
    pub lanes: Vec<Lane>,
    pub actors: Vec<Actor>,
}

impl Scene {
    /// Scene with road geometry only: no actors and a stationary ego.
    pub fn empty(grid: Grid, lanes: Vec<Lane>) -> Self {
        Scene {
            seed: 0,
            difficulty: Difficulty::Sparse,
            grid,
            ego_lane: 0,
            ego_track: vec![Pose::new(0.0, 0.0, 0.0); PAST_SWEEPS + FUTURE_STEPS],
            lanes,
            actors: Vec::new(),
        }
    }

    /// Ego pose at past sweep `k` (`k = 0` is now).
    pub fn ego_at_sweep(&self, k: usize) -> Pose {
        self.ego_track[PAST_SWEEPS - 1 - k]
    }

    pub fn ego_future(&self) -> &[Pose] {
        &self.ego_track[PAST_SWEEPS..]
    }

    pub fn drivable(&self, p: Point) -> bool {
        self.lanes.iter().any(|l| l.contains(p))
    }
}

pub fn ego_box(pose: Pose) -> OrientedBox {
    OrientedBox::at_pose(pose, EGO_LENGTH, EGO_WIDTH)
}

#[cfg(test)]
mod tests;
