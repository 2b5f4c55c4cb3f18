//! Binary spatial attention: a U-Net scorer, Gumbel perturbation, hard
//! thresholding with a straight-through soft path, and fixed baseline masks.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{log_sigmoid, Bound, Conv2d, ConvGeom, Graph, ParamStore, Padding, Real, Tensor, Var};
use crate::scene::{lane_surface, rasterize_labels, BevInput, Grid, Scene, FEATURE_STRIDE};

/// Default temperature of the soft relaxation.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
/// Sparsity the proximity baseline is tuned to.
pub const PROXIMITY_SPARSITY: f64 = 0.94;

fn geom(k: usize, s: usize, p: usize, padding: Padding) -> ConvGeom {
    ConvGeom { mode: padding, ..ConvGeom::new(k, s, p) }
}

/// Encoder-decoder with two stride-2 stages and skip concatenation,
/// producing one logit per feature cell.
#[derive(Clone, Debug)]
pub struct UNetScorer {
    pub in_channels: usize,
    e0: Conv2d,
    e1: Conv2d,
    e2: Conv2d,
    d1: Conv2d,
    d0: Conv2d,
    head: Conv2d,
}

impl UNetScorer {
    /// `enc` are the three encoder widths, `dec` the two decoder widths.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        in_channels: usize,
        enc: [usize; 3],
        dec: [usize; 2],
        padding: Padding,
    ) -> Self {
        let mut conv = |name: &str, cin, cout, k, s| {
            let p = k / 2;
            Conv2d::new(store, rng, &format!("{prefix}.{name}"), cin, cout, geom(k, s, p, padding), true)
        };
        let e0 = conv("e0", in_channels, enc[0], 1, 1);
        let e1 = conv("e1", enc[0], enc[1], 3, 2);
        let e2 = conv("e2", enc[1], enc[2], 3, 2);
        let d1 = conv("d1", enc[2] + enc[1], dec[0], 3, 1);
        let d0 = conv("d0", dec[0] + enc[0], dec[1], 3, 1);
        let head = conv("z", dec[1], 1, 1, 1).zeroed(store);
        UNetScorer { in_channels, e0, e1, e2, d1, d0, head }
    }

    /// Logits `z` of shape `[n, 1, h, w]`; `h` and `w` must be multiples of 4.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let [_, c, h, w] = g.value(x).dims4();
        if c != self.in_channels {
            return Err(Error::shape("unet_score", format!("expected {} channels, got {c}", self.in_channels)));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape("unet_score", format!("spatial {h}x{w} not divisible by 4")));
        }
        let e0 = self.e0.forward(g, p, x)?;
        let e0 = g.relu(e0);
        let e1 = self.e1.forward(g, p, e0)?;
        let e1 = g.relu(e1);
        let e2 = self.e2.forward(g, p, e1)?;
        let e2 = g.relu(e2);
        let u2 = g.upsample_bilinear(e2, 2)?;
        let c1 = g.concat(&[u2, e1])?;
        let d1 = self.d1.forward(g, p, c1)?;
        let d1 = g.relu(d1);
        let u1 = g.upsample_bilinear(d1, 2)?;
        let c0 = g.concat(&[u1, e0])?;
        let d0 = self.d0.forward(g, p, c0)?;
        let d0 = g.relu(d0);
        self.head.forward(g, p, d0)
    }

    /// Per-layer FLOPs on an `h x w` feature grid.
    pub fn flops(&self, h: usize, w: usize) -> Result<Vec<(&'static str, u64)>> {
        Ok(vec![
            ("unet.e0", self.e0.flops(h, w)?),
            ("unet.e1", self.e1.flops(h, w)?),
            ("unet.e2", self.e2.flops(h / 2, w / 2)?),
            ("unet.d1", self.d1.flops(h / 2, w / 2)?),
            ("unet.d0", self.d0.flops(h, w)?),
            ("unet.z", self.head.flops(h, w)?),
        ])
    }
}

/// `-ln(-ln u)` for `u` in the open unit interval.
pub fn gumbel_noise(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::invalid(format!("uniform sample {u} outside (0, 1)")));
    }
    Ok(-(-u.ln()).ln())
}

pub fn sample_gumbel<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

pub fn gumbel_tensor<T: Real, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(sample_gumbel(rng))).collect()).expect("shape by construction")
}

/// Logits with `pi = sigmoid(z)` and the noise-perturbed log-probabilities
/// `alpha0 = ln pi + g0`, `alpha1 = ln (1 - pi) + g1`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLogits {
    pub z: Tensor<f64>,
    pub pi: Tensor<f64>,
    pub alpha0: Tensor<f64>,
    pub alpha1: Tensor<f64>,
}

impl AttentionLogits {
    pub fn new(z: Tensor<f64>, noise: Option<(&Tensor<f64>, &Tensor<f64>)>) -> Result<Self> {
        let mut alpha0 = z.map(log_sigmoid);
        let mut alpha1 = z.map(|v| log_sigmoid(-v));
        if let Some((g0, g1)) = noise {
            alpha0 = alpha0.zip_map(g0, |a, g| a + g)?;
            alpha1 = alpha1.zip_map(g1, |a, g| a + g)?;
        }
        let pi = z.map(|v| 1.0 / (1.0 + (-v).exp()));
        Ok(AttentionLogits { z, pi, alpha0, alpha1 })
    }

    /// Directly from perturbed logits (no `z`).
    pub fn from_alphas(alpha0: Tensor<f64>, alpha1: Tensor<f64>) -> Result<Self> {
        let z = alpha0.zip_map(&alpha1, |a, b| a - b)?;
        let pi = z.map(|v| 1.0 / (1.0 + (-v).exp()));
        Ok(AttentionLogits { z, pi, alpha0, alpha1 })
    }
}

/// Hard mask `A` with its soft relaxation; tensors are `[1, 1, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub hard: Tensor<f32>,
    pub soft: Tensor<f32>,
    pub temperature: f64,
}

impl AttentionMask {
    /// Mask whose soft part equals the hard part.
    pub fn from_hard(hard: Tensor<f32>) -> Result<Self> {
        let [_, _, h, w] = hard.dims4();
        let hard = hard.reshape(&[1, 1, h, w])?;
        Ok(AttentionMask { soft: hard.clone(), hard, temperature: DEFAULT_TEMPERATURE })
    }

    pub fn dense(rows: usize, cols: usize) -> Self {
        Self::from_hard(Tensor::ones(&[1, 1, rows, cols])).expect("4-d shape")
    }

    pub fn rows(&self) -> usize {
        self.hard.dims4()[2]
    }

    pub fn cols(&self) -> usize {
        self.hard.dims4()[3]
    }

    pub fn is_active(&self, i: usize, j: usize) -> bool {
        self.hard.at4(0, 0, i, j) != 0.0
    }

    pub fn active_count(&self) -> usize {
        self.hard.data().iter().filter(|&&v| v != 0.0).count()
    }

    /// Fraction of inactive cells.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.active_count() as f64 / self.hard.numel() as f64
    }

    /// Binary PGM (P5), 255 for active cells; image rows follow mask rows.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols(), self.rows()).into_bytes();
        out.extend(self.hard.data().iter().map(|&v| if v != 0.0 { 255u8 } else { 0 }));
        out
    }

    /// Flat little-endian `f32` export of the hard mask.
    pub fn to_bytes(&self) -> Vec<u8> {
        BevInput { tensor: self.hard.clone() }.to_bytes()
    }
}

fn check_temperature(k: f64) -> Result<()> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::invalid(format!("temperature {k} must be positive")));
    }
    Ok(())
}

/// `A = 1[alpha0 >= alpha1]` and
/// `soft = exp(alpha0 / K) / (exp(alpha0 / K) + exp(alpha1 / K))`.
pub fn binarize(logits: &AttentionLogits, k: f64) -> Result<AttentionMask> {
    check_temperature(k)?;
    let hard = logits.alpha0.zip_map(&logits.alpha1, |a, b| if a >= b { 1.0 } else { 0.0 })?;
    let soft = logits.alpha0.zip_map(&logits.alpha1, |a, b| 1.0 / (1.0 + ((b - a) / k).exp()))?;
    let [_, _, h, w] = hard.dims4();
    Ok(AttentionMask {
        hard: hard.cast::<f32>().reshape(&[1, 1, h, w])?,
        soft: soft.cast::<f32>().reshape(&[1, 1, h, w])?,
        temperature: k,
    })
}

/// Attention recorded on a tape.
pub struct AttentionVars {
    /// Forward value is the hard mask; gradients flow through `soft`.
    pub hard: Var,
    pub soft: Var,
    pub mask: AttentionMask,
}

/// Perturbs `z`, thresholds, and wires the straight-through estimator.
pub fn attend<T: Real>(
    g: &mut Graph<T>,
    z: Var,
    noise: Option<(&Tensor<T>, &Tensor<T>)>,
    k: f64,
) -> Result<AttentionVars> {
    check_temperature(k)?;
    let mut a0 = g.log_sigmoid(z);
    let nz = g.neg(z);
    let mut a1 = g.log_sigmoid(nz);
    if let Some((g0, g1)) = noise {
        a0 = g.add_const(a0, g0.clone())?;
        a1 = g.add_const(a1, g1.clone())?;
    }
    let diff = g.sub(a0, a1)?;
    let scaled = g.scale(diff, T::of(1.0 / k));
    let soft = g.sigmoid(scaled);
    let hard_t = g.value(a0).zip_map(g.value(a1), |a, b| if a >= b { T::one() } else { T::zero() })?;
    let hard = g.straight_through(hard_t.clone(), soft)?;
    let [_, _, h, w] = hard_t.dims4();
    let mask = AttentionMask {
        hard: hard_t.cast::<f32>().reshape(&[1, 1, h, w])?,
        soft: g.value(soft).cast::<f32>().reshape(&[1, 1, h, w])?,
        temperature: k,
    };
    Ok(AttentionVars { hard, soft, mask })
}

/// Sum of the hard mask; differentiable through the soft path.
pub fn sparsity_loss<T: Real>(g: &mut Graph<T>, hard: Var) -> Var {
    g.sum(hard)
}

pub fn sparsity_loss_value(mask: &AttentionMask) -> f64 {
    mask.hard.data().iter().map(|&v| v as f64).sum()
}

/// Where an attention mask comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Learned,
    Road,
    Vehicle,
    Proximity,
    Dense,
}

impl MaskSource {
    pub fn name(self) -> &'static str {
        match self {
            MaskSource::Learned => "learned",
            MaskSource::Road => "road",
            MaskSource::Vehicle => "vehicle",
            MaskSource::Proximity => "proximity",
            MaskSource::Dense => "dense",
        }
    }
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "learned" => MaskSource::Learned,
            "road" => MaskSource::Road,
            "vehicle" => MaskSource::Vehicle,
            "proximity" => MaskSource::Proximity,
            "dense" => MaskSource::Dense,
            _ => return Err(Error::Config(format!("unknown mask source {s:?}"))),
        })
    }
}

fn feature_dims(grid: &Grid) -> Result<(usize, usize)> {
    let (r, c) = grid.dims()?;
    Ok((r / FEATURE_STRIDE, c / FEATURE_STRIDE))
}

/// Disk of radius `r` meters around the ego position, on the feature grid.
pub fn proximity_mask(grid: &Grid, r: f64) -> Result<AttentionMask> {
    let (h, w) = feature_dims(grid)?;
    let mut t = Tensor::zeros(&[1, 1, h, w]);
    for i in 0..h {
        for j in 0..w {
            let c = grid.cell_center_scaled(i, j, FEATURE_STRIDE);
            if c[0].hypot(c[1]) <= r {
                t.set4(0, 0, i, j, 1.0);
            }
        }
    }
    AttentionMask::from_hard(t)
}

/// Radius whose disk mask has sparsity closest to `target`. Bisection
/// locates the step where sparsity crosses `target`; the closer side wins.
pub fn proximity_radius(grid: &Grid, target: f64) -> Result<f64> {
    let (mut lo, mut hi) = (0.0, grid.length.hypot(grid.width) * 2.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if proximity_mask(grid, mid)?.sparsity() > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let below = proximity_mask(grid, lo)?.sparsity();
    let above = proximity_mask(grid, hi)?.sparsity();
    Ok(if (below - target).abs() < (above - target).abs() { lo } else { hi })
}

/// Fixed masks used as baselines.
pub fn baseline_mask(kind: MaskSource, scene: &Scene) -> Result<AttentionMask> {
    let grid = &scene.grid;
    let (h, w) = feature_dims(grid)?;
    match kind {
        MaskSource::Dense => Ok(AttentionMask::dense(h, w)),
        MaskSource::Proximity => proximity_mask(grid, proximity_radius(grid, PROXIMITY_SPARSITY)?),
        MaskSource::Road => {
            let surface = lane_surface(scene)?;
            let cols = w * FEATURE_STRIDE;
            let mut t = Tensor::zeros(&[1, 1, h, w]);
            for i in 0..h * FEATURE_STRIDE {
                for j in 0..cols {
                    if surface[i * cols + j] {
                        t.set4(0, 0, i / FEATURE_STRIDE, j / FEATURE_STRIDE, 1.0);
                    }
                }
            }
            AttentionMask::from_hard(t)
        }
        MaskSource::Vehicle => {
            let labels = rasterize_labels(scene)?;
            let mut t = Tensor::zeros(&[1, 1, h, w]);
            for i in 0..h {
                for j in 0..w {
                    if labels.owner[i * w + j].is_none() {
                        continue;
                    }
                    for ii in i.saturating_sub(1)..(i + 2).min(h) {
                        for jj in j.saturating_sub(1)..(j + 2).min(w) {
                            t.set4(0, 0, ii, jj, 1.0);
                        }
                    }
                }
            }
            AttentionMask::from_hard(t)
        }
        MaskSource::Learned => Err(Error::Config("learned masks come from a trained model".into())),
    }
}
