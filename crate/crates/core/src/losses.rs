//! Multi-task objective: max-margin planning, detection losses reweighted by
//! the attention mask, the mask sparsity term and weight decay.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::nn::{Bound, Graph, Real, SamplePoint, Tensor, Var};
use crate::planner::off_road;
use crate::scene::{Grid, Labels, Scene, FUTURE_STEPS};

pub use crate::scene::{decode_delta, encode_delta};

/// Probability clamp inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub plan: f64,
    pub cls: f64,
    pub reg: f64,
    /// Weight of the mask sparsity term.
    pub attn: f64,
    /// Multiplies `attn`; compensates for the small grid, on which the
    /// summed detection losses are far smaller than at full scale.
    #[serde(default = "one")]
    pub attn_scale: f64,
    pub weight_decay: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    /// Added to the margin of a negative at each step it leaves the road.
    pub v_penalty: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            plan: 0.001,
            cls: 1.0,
            reg: 0.5,
            attn: 1e-6,
            attn_scale: 1.0,
            weight_decay: 0.0,
            gamma0: 0.1,
            gamma1: 0.9,
            v_penalty: 1.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.plan,
            self.cls,
            self.reg,
            self.attn,
            self.attn_scale,
            self.weight_decay,
            self.gamma0,
            self.gamma1,
            self.v_penalty,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    /// Sparsity weight actually applied to `sum(A)`.
    pub fn effective_attn(&self) -> f64 {
        self.attn * self.attn_scale
    }
}

/// Margins `Delta_t^(i)`, flattened negative-major: distance to the ground
/// truth waypoint plus `v_penalty` where the negative's ego box leaves the
/// road.
pub fn task_margins(gt: &[Pose], negatives: &[Vec<Pose>], scene: Option<&Scene>, v_penalty: f64) -> Result<Vec<f64>> {
    if negatives.is_empty() {
        return Err(Error::invalid("planning loss needs at least one negative"));
    }
    if gt.len() != FUTURE_STEPS || negatives.iter().any(|n| n.len() != FUTURE_STEPS) {
        return Err(Error::invalid(format!("trajectories must have {FUTURE_STEPS} waypoints")));
    }
    let mut out = Vec::with_capacity(negatives.len() * FUTURE_STEPS);
    for neg in negatives {
        for (g, n) in gt.iter().zip(neg) {
            let v = match scene {
                Some(s) if off_road(s, *n) => v_penalty,
                _ => 0.0,
            };
            out.push((g.x - n.x).hypot(g.y - n.y) + v);
        }
    }
    Ok(out)
}

fn sample_points<'a>(grid: &'a Grid, poses: &'a [Pose]) -> impl Iterator<Item = SamplePoint> + 'a {
    poses.iter().enumerate().map(move |(t, p)| {
        let (row, col) = grid.to_cell_coords([p.x, p.y]);
        SamplePoint { t, row, col }
    })
}

/// `max_i sum_t max(0, c_t - c_t^(i) + Delta_t^(i))` with costs read
/// bilinearly from `cost: [1, T, H, W]`.
pub fn planning_loss<T: Real>(
    g: &mut Graph<T>,
    cost: Var,
    grid: &Grid,
    gt: &[Pose],
    negatives: &[Vec<Pose>],
    margins: &[f64],
) -> Result<Var> {
    let n = negatives.len();
    if n == 0 {
        return Err(Error::invalid("planning loss needs at least one negative"));
    }
    if margins.len() != n * FUTURE_STEPS {
        return Err(Error::shape("planning_loss", format!("{} margins for {n} negatives", margins.len())));
    }
    let gt_pts: Vec<SamplePoint> = (0..n).flat_map(|_| sample_points(grid, gt)).collect();
    let neg_pts: Vec<SamplePoint> = negatives.iter().flat_map(|p| sample_points(grid, p)).collect();
    let c_gt = g.sample_bilinear(cost, &gt_pts)?;
    let c_neg = g.sample_bilinear(cost, &neg_pts)?;
    let d = g.sub(c_gt, c_neg)?;
    let delta = Tensor::from_vec(&[n * FUTURE_STEPS], margins.iter().map(|&m| T::of(m)).collect())?;
    let d = g.add_const(d, delta)?;
    let d = g.relu(d);
    let d = g.reshape(d, &[n, FUTURE_STEPS])?;
    let per_neg = g.sum_last(d)?;
    g.max_all(per_neg)
}

/// Plain-number version of [`planning_loss`] from per-step costs.
pub fn planning_loss_value(gt_costs: &[f64], neg_costs: &[Vec<f64>], margins: &[f64]) -> f64 {
    neg_costs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            (0..gt_costs.len())
                .map(|t| (gt_costs[t] - c[t] + margins[i * gt_costs.len() + t]).max(0.0))
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Per-cell binary cross-entropy `[1, 1, h, w]`.
pub fn cls_loss_map<T: Real>(g: &mut Graph<T>, scores: Var, labels: &Labels) -> Result<Var> {
    let [_, _, h, w] = g.value(scores).dims4();
    let target = labels.score.cast::<T>().reshape(&[1, 1, h, w])?;
    g.bce(scores, target, BCE_EPS)
}

/// Per-cell smooth-L1 over all 6 (T + 1) box offsets, zero where no box is
/// owned; `[1, 1, h, w]`.
pub fn reg_loss_map<T: Real>(g: &mut Graph<T>, regression: Var, labels: &Labels) -> Result<Var> {
    let [_, c, h, w] = g.value(regression).dims4();
    let target = labels.regression.cast::<T>().reshape(&[1, c, h, w])?;
    let l = g.smooth_l1(regression, target)?;
    let l = g.sum_channels(l);
    let owned = labels.owner.iter().map(|o| if o.is_some() { T::one() } else { T::zero() }).collect();
    g.mul_const(l, Tensor::from_vec(&[1, 1, h, w], owned)?)
}

/// `gamma1 * sum(A * L) + gamma0 * sum(L)`.
pub fn reweight<T: Real>(g: &mut Graph<T>, loss_map: Var, mask: Option<Var>, gamma0: f64, gamma1: f64) -> Result<Var> {
    let total = g.sum(loss_map);
    let attended = match mask {
        Some(a) => {
            let m = g.mul(loss_map, a)?;
            g.sum(m)
        }
        None => total,
    };
    let a = g.scale(attended, T::of(gamma1));
    let b = g.scale(total, T::of(gamma0));
    g.add(a, b)
}

/// Unweighted scalar parts of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub plan: Var,
    pub cls: Var,
    pub reg: Var,
    /// `sum(A)`, when a learned mask is in play.
    pub attn: Option<Var>,
}

/// Weighted sum of the parts plus weight decay over every bound parameter.
pub fn total_loss<T: Real>(g: &mut Graph<T>, parts: &LossParts, w: &LossWeights, params: &Bound) -> Result<Var> {
    let mut terms = vec![
        g.scale(parts.plan, T::of(w.plan)),
        g.scale(parts.cls, T::of(w.cls)),
        g.scale(parts.reg, T::of(w.reg)),
    ];
    if let Some(a) = parts.attn {
        terms.push(g.scale(a, T::of(w.effective_attn())));
    }
    if w.weight_decay > 0.0 {
        for &p in params.vars() {
            let sq = g.sum_sq(p);
            terms.push(g.scale(sq, T::of(w.weight_decay)));
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// One row of the training loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_plan: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_attn: f64,
    pub sparsity: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn write_loss_csv<W: Write>(w: W, records: &[LossRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    if records.is_empty() {
        wr.write_record(["step", "l_plan", "l_cls", "l_reg", "l_attn", "sparsity", "total", "lr"])?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_loss_csv(f, records)
}
