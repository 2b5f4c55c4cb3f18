//! Open-loop metrics: planning L2, collision and lane-violation rates, and
//! detection mAP on the full grid and inside the attention mask.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMask;
use crate::error::{Error, Result};
use crate::geometry::{boxes_overlap, rotated_iou, OrientedBox, Pose};
use crate::nn::{Real, Tensor};
use crate::planner::off_road;
use crate::scene::{anchor_at, decode_delta, ego_box, Actor, Grid, Scene, FEATURE_STRIDE};

pub const IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];
/// Minimum score for a cell to emit a detection.
pub const SCORE_THRESHOLD: f64 = 0.05;
pub const NMS_IOU: f64 = 0.5;

/// Per-step Euclidean distance between matching waypoints.
pub fn planning_l2(pred: &[Pose], gt: &[Pose]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("trajectory lengths differ: {} vs {}", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| (p.x - g.x).hypot(p.y - g.y)).collect())
}

/// True when the ego box along `pred` overlaps some actor box at the same
/// future step.
pub fn collides(pred: &[Pose], actors: &[Actor]) -> bool {
    pred.iter().enumerate().any(|(k, &p)| {
        let ego = ego_box(p);
        actors.iter().any(|a| k < a.future_track.len() && boxes_overlap(&ego, &a.box_at_step(k + 1)))
    })
}

/// True when some corner of the ego box leaves the lanes at any step.
pub fn lane_violation(scene: &Scene, pred: &[Pose]) -> bool {
    pred.iter().any(|&p| off_road(scene, p))
}

/// Share of `true` flags in percent; 0 for an empty slice.
pub fn percent(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    100.0 * flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: OrientedBox,
    pub score: f64,
}

/// Decodes every cell scoring at least `threshold`. `scores` is
/// `[1, 1, h, w]` and `regression` carries the current box in channels 0..6.
pub fn decode_detections<T: Real>(
    scores: &Tensor<T>,
    regression: &Tensor<T>,
    grid: &Grid,
    threshold: f64,
) -> Result<Vec<Detection>> {
    let [_, _, h, w] = scores.dims4();
    let [_, c, rh, rw] = regression.dims4();
    if c < 6 || (rh, rw) != (h, w) {
        return Err(Error::shape("decode_detections", format!("scores {h}x{w}, regression {c}x{rh}x{rw}")));
    }
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let s = scores.at4(0, 0, i, j).f64();
            if s < threshold {
                continue;
            }
            let d: [f64; 6] = std::array::from_fn(|k| regression.at4(0, k, i, j).f64());
            out.push(Detection { bbox: decode_delta(&anchor_at(grid, i, j), &d), score: s });
        }
    }
    Ok(out)
}

/// Greedy non-maximum suppression on rotated IoU. Equal scores keep their
/// input order.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep.iter().all(|k| rotated_iou(&k.bbox, &d.bbox) <= iou) {
            keep.push(d);
        }
    }
    keep
}

/// How a box is judged to lie inside an attention mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Membership {
    /// The feature cell holding the box center is active.
    #[default]
    CenterCell,
    /// The box overlaps any active feature cell.
    AnyOverlap,
}

pub fn in_mask(mask: &AttentionMask, grid: &Grid, b: &OrientedBox, rule: Membership) -> bool {
    match rule {
        Membership::CenterCell => {
            grid.cell_of_scaled([b.cx, b.cy], FEATURE_STRIDE).is_some_and(|(i, j)| mask.is_active(i, j))
        }
        Membership::AnyOverlap => {
            let side = grid.resolution * FEATURE_STRIDE as f64;
            (0..mask.rows()).any(|i| {
                (0..mask.cols()).any(|j| {
                    if !mask.is_active(i, j) {
                        return false;
                    }
                    let c = grid.cell_center_scaled(i, j, FEATURE_STRIDE);
                    boxes_overlap(&OrientedBox::new(c[0], c[1], side, side, 0.0), b)
                })
            })
        }
    }
}

/// Detections and ground truth of one scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneDetections {
    pub detections: Vec<Detection>,
    pub gts: Vec<OrientedBox>,
}

impl SceneDetections {
    /// Current-step actor boxes as ground truth.
    pub fn from_scene(scene: &Scene, detections: Vec<Detection>) -> Self {
        SceneDetections { detections, gts: scene.actors.iter().map(|a| a.bbox()).collect() }
    }

    /// Keeps only the ground truth and detections inside `mask`.
    pub fn restrict(&self, mask: &AttentionMask, grid: &Grid, rule: Membership) -> Self {
        SceneDetections {
            detections: self.detections.iter().copied().filter(|d| in_mask(mask, grid, &d.bbox, rule)).collect(),
            gts: self.gts.iter().copied().filter(|b| in_mask(mask, grid, b, rule)).collect(),
        }
    }
}

/// Share of ground-truth actors inside the mask, `None` without actors.
pub fn attended_coverage(mask: &AttentionMask, scene: &Scene, rule: Membership) -> Option<f64> {
    if scene.actors.is_empty() {
        return None;
    }
    let inside = scene.actors.iter().filter(|a| in_mask(mask, &scene.grid, &a.bbox(), rule)).count();
    Some(inside as f64 / scene.actors.len() as f64)
}

/// True-positive flags of all detections in descending score order, plus
/// the number of ground-truth boxes. Each detection claims the unmatched box
/// of highest IoU at or above `iou`.
pub fn match_detections(scenes: &[SceneDetections], iou: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<(usize, usize)> =
        scenes.iter().enumerate().flat_map(|(s, sd)| (0..sd.detections.len()).map(move |d| (s, d))).collect();
    order.sort_by(|a, b| scenes[b.0].detections[b.1].score.total_cmp(&scenes[a.0].detections[a.1].score));
    let mut taken: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
    let mut tp = Vec::with_capacity(order.len());
    for (s, d) in order {
        let det = &scenes[s].detections[d].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (k, gt) in scenes[s].gts.iter().enumerate() {
            if taken[s][k] {
                continue;
            }
            let v = rotated_iou(det, gt);
            if v >= iou && best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        if let Some((k, _)) = best {
            taken[s][k] = true;
        }
        tp.push(best.is_some());
    }
    (tp, scenes.iter().map(|s| s.gts.len()).sum())
}

/// Average precision with 11-point interpolation over recall levels
/// `0, 0.1, ..., 1`. Zero when there is no ground truth.
pub fn average_precision(scenes: &[SceneDetections], iou: f64) -> f64 {
    let (tp, n_gt) = match_detections(scenes, iou);
    if n_gt == 0 {
        return 0.0;
    }
    let mut curve = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        curve.push((hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64));
    }
    let mut acc = 0.0;
    for r in 0..=10 {
        let level = r as f64 / 10.0;
        acc += curve.iter().filter(|(rec, _)| *rec >= level - 1e-12).map(|&(_, p)| p).fold(0.0, f64::max);
    }
    acc / 11.0
}

/// mAP at each of [`IOU_THRESHOLDS`].
pub fn detection_map(scenes: &[SceneDetections]) -> [f64; 3] {
    IOU_THRESHOLDS.map(|t| average_precision(scenes, t))
}

/// Everything measured on one evaluation scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEval {
    /// Per-step L2 between planned and driven waypoints.
    pub l2: Vec<f64>,
    pub collision: bool,
    pub lane_violation: bool,
    pub detections: SceneDetections,
    /// Detections restricted to the attention mask.
    pub attended: SceneDetections,
    pub sparsity: f64,
}

impl SceneEval {
    pub fn new(scene: &Scene, plan: &[Pose], detections: Vec<Detection>, mask: &AttentionMask, rule: Membership) -> Result<Self> {
        let detections = SceneDetections::from_scene(scene, detections);
        Ok(SceneEval {
            l2: planning_l2(plan, scene.ego_future())?,
            collision: collides(plan, &scene.actors),
            lane_violation: lane_violation(scene, plan),
            attended: detections.restrict(mask, &scene.grid, rule),
            detections,
            sparsity: mask.sparsity(),
        })
    }
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub scenes: usize,
    /// Mean fraction of inactive mask cells.
    pub sparsity: f64,
    /// Backbone FLOPs per scene.
    pub flops: u64,
    /// Meters.
    pub planning_l2_at_3s: f64,
    /// Percent of scenes with a collision at any step.
    pub collision_rate_over_3s: f64,
    /// Percent of scenes with a lane violation at any step.
    pub lane_violation_over_3s: f64,
    pub map_full: [f64; 3],
    pub map_attended: [f64; 3],
}

const COLUMNS: [&str; 13] = [
    "label",
    "scenes",
    "sparsity",
    "flops",
    "l2_3s",
    "collision_pct",
    "lane_violation_pct",
    "map_full_0.3",
    "map_full_0.5",
    "map_full_0.7",
    "map_attended_0.3",
    "map_attended_0.5",
    "map_attended_0.7",
];

impl MetricsReport {
    /// Ordered fold over per-scene results.
    pub fn aggregate(label: impl Into<String>, evals: &[SceneEval], flops: u64) -> Self {
        let n = evals.len().max(1) as f64;
        let full: Vec<SceneDetections> = evals.iter().map(|e| e.detections.clone()).collect();
        let attended: Vec<SceneDetections> = evals.iter().map(|e| e.attended.clone()).collect();
        let flags = |f: fn(&SceneEval) -> bool| evals.iter().map(f).collect::<Vec<_>>();
        MetricsReport {
            label: label.into(),
            scenes: evals.len(),
            sparsity: evals.iter().map(|e| e.sparsity).sum::<f64>() / n,
            flops,
            planning_l2_at_3s: evals.iter().map(|e| e.l2.last().copied().unwrap_or(0.0)).sum::<f64>() / n,
            collision_rate_over_3s: percent(&flags(|e| e.collision)),
            lane_violation_over_3s: percent(&flags(|e| e.lane_violation)),
            map_full: detection_map(&full),
            map_attended: detection_map(&attended),
        }
    }

    fn row(&self) -> [String; 13] {
        let f = |v: f64| format!("{v:.4}");
        [
            self.label.clone(),
            self.scenes.to_string(),
            f(self.sparsity),
            self.flops.to_string(),
            f(self.planning_l2_at_3s),
            f(self.collision_rate_over_3s),
            f(self.lane_violation_over_3s),
            f(self.map_full[0]),
            f(self.map_full[1]),
            f(self.map_full[2]),
            f(self.map_attended[0]),
            f(self.map_attended[1]),
            f(self.map_attended[2]),
        ]
    }
}

pub fn write_metrics_csv<W: Write>(w: W, reports: &[MetricsReport]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(COLUMNS)?;
    for r in reports {
        wr.write_record(r.row())?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_metrics_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(f, reports)
}

/// Column-aligned text table with sparsity and rates in percent.
pub fn metrics_table(reports: &[MetricsReport]) -> String {
    let head = [
        "Model", "Sparsity %", "GFLOPs", "L2@3s (m)", "Collision %", "Lane viol. %", "mAP .3", "mAP .5", "mAP .7",
        "Att .3", "Att .5", "Att .7",
    ];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut v = vec![
                r.label.clone(),
                format!("{:.1}", 100.0 * r.sparsity),
                format!("{:.3}", r.flops as f64 / 1e9),
                format!("{:.3}", r.planning_l2_at_3s),
                format!("{:.2}", r.collision_rate_over_3s),
                format!("{:.2}", r.lane_violation_over_3s),
            ];
            v.extend(r.map_full.iter().chain(&r.map_attended).map(|m| format!("{m:.3}")));
            v
        })
        .collect();
    let width: Vec<usize> =
        (0..head.len()).map(|c| rows.iter().map(|r| r[c].len()).chain([head[c].len()]).max().unwrap_or(0)).collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &head);
    let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
    for r in &rows {
        line(&mut out, &r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

#[cfg(test)]
mod tests;
