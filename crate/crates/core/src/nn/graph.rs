//! Recording tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! nodes in reverse recording order, which is a valid topological order.

use crate::error::{Error, Result};
use crate::nn::conv::{self, bilinear_src, ConvGeom};
use crate::nn::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A sample location in a `[.., T, H, W]` tensor: plane `t`, fractional
/// row/column in cell-center coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub t: usize,
    pub row: f64,
    pub col: f64,
}

#[derive(Clone, Debug)]
struct BilinearTap {
    idx: [usize; 4],
    wts: [f64; 4],
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulConst(Var, Tensor<T>),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Sum(Var),
    SumSq(Var),
    SumChannels(Var),
    SumLast(Var),
    MaxAll(Var, usize),
    Reshape(Var),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Deconv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize },
    UpNearest { x: Var, f: usize },
    UpBilinear { x: Var, f: usize },
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    SmoothL1 { x: Var, target: Tensor<T> },
    Bce { y: Var, target: Tensor<T>, eps: f64 },
    StraightThrough(Var),
    Sample { c: Var, taps: Vec<BilinearTap> },
    Gather { x: Var, origins: Vec<(isize, isize)> },
    Scatter { x: Var, origins: Vec<(isize, isize)> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner tape of recorded operations.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `v`'s shape when `v` is unreachable from
    /// the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `log σ(v)`, stable for large |v|.
pub(crate) fn log_sigmoid<T: Real>(v: T) -> T {
    let softplus_neg = (-v).max(T::zero()) + (-(v.abs())).exp().ln_1p();
    -softplus_neg
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulBcast(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::Sum(a)
            | Op::SumSq(a)
            | Op::SumChannels(a)
            | Op::SumLast(a)
            | Op::MaxAll(a, _)
            | Op::Reshape(a)
            | Op::StraightThrough(a) => vec![*a],
            Op::Conv { x, w, b, .. } | Op::Deconv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::UpNearest { x, .. }
            | Op::UpBilinear { x, .. }
            | Op::SliceChannels { x, .. }
            | Op::SmoothL1 { x, .. }
            | Op::Gather { x, .. }
            | Op::Scatter { x, .. } => vec![*x],
            Op::Bce { y, .. } => vec![*y],
            Op::Sample { c, .. } => vec![*c],
            Op::Concat(parts) => parts.clone(),
        }
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `x[n, c, i, j] * m[n, 0, i, j]`: a single-channel map broadcast over
    /// channels.
    pub fn mul_bcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4();
        let md = self.value(m).dims4();
        if md != [n, 1, h, w] {
            return Err(Error::shape(
                "mul_bcast",
                format!("map {:?} does not broadcast over {:?}", self.value(m).shape(), self.value(x).shape()),
            ));
        }
        let xv = self.value(x);
        let mv = self.value(m).data();
        let plane = h * w;
        let mut out = xv.clone();
        for b in 0..n {
            let mm = &mv[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for (o, &s) in out.data_mut()[base..base + plane].iter_mut().zip(mm) {
                    *o *= s;
                }
            }
        }
        Ok(self.push(out, Op::MulBcast(x, m)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let v = self.value(a).zip_map(&c, |x, y| x + y)?;
        Ok(self.push(v, Op::AddConst(a)))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddConst(a))
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let v = self.value(a).zip_map(&c, |x, y| x * y)?;
        Ok(self.push(v, Op::MulConst(a, c)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).dot(self.value(a)));
        self.push(v, Op::SumSq(a))
    }

    /// `[n, c, h, w] -> [n, 1, h, w]`.
    pub fn sum_channels(&mut self, a: Var) -> Var {
        let [n, c, h, w] = self.value(a).dims4();
        let src = self.value(a).data();
        let plane = h * w;
        let mut out = vec![T::zero(); n * plane];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for (o, &s) in out[b * plane..(b + 1) * plane].iter_mut().zip(&src[base..base + plane]) {
                    *o += s;
                }
            }
        }
        let v = Tensor::from_vec(&[n, 1, h, w], out).expect("shape by construction");
        self.push(v, Op::SumChannels(a))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let Some((&last, rest)) = shape.split_last() else {
            return Err(Error::shape("sum_last", "scalar input"));
        };
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(last.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let v = Tensor::from_vec(rest, out)?;
        Ok(self.push(v, Op::SumLast(a)))
    }

    /// Maximum element; ties resolve to the lowest flat index.
    pub fn max_all(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data();
        if data.is_empty() {
            return Err(Error::shape("max_all", "empty tensor"));
        }
        let mut best = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[best] {
                best = i;
            }
        }
        let v = Tensor::scalar(data[best]);
        Ok(self.push(v, Op::MaxAll(a, best)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    // ---- convolution -------------------------------------------------

    /// 2-D cross-correlation. `x: [n, cin, h, w]`, `w: [cout, cin, k, k]`,
    /// `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let s = conv::conv_shape(self.value(x).dims4(), self.value(w).shape(), &geom)?;
        if let Some(b) = b {
            if self.value(b).numel() != s.cout {
                return Err(Error::shape("conv2d", format!("bias has {} entries, need {}", self.value(b).numel(), s.cout)));
            }
        }
        let out = conv::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &s,
            &geom,
        );
        let v = Tensor::from_vec(&[s.n, s.cout, s.oh, s.ow], out)?;
        Ok(self.push(v, Op::Conv { x, w, b, geom }))
    }

    /// Transposed convolution. `w: [cin, cout, k, k]`; adjoint of
    /// [`Graph::conv2d`] with the same weight array.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let s = conv::deconv_shape(self.value(x).dims4(), self.value(w).shape(), &geom)?;
        if let Some(b) = b {
            if self.value(b).numel() != s.cout {
                return Err(Error::shape("deconv2d", format!("bias has {} entries, need {}", self.value(b).numel(), s.cout)));
            }
        }
        let out = conv::deconv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &s,
            &geom,
        );
        let v = Tensor::from_vec(&[s.n, s.cout, s.oh, s.ow], out)?;
        Ok(self.push(v, Op::Deconv { x, w, b, geom }))
    }

    // ---- resampling --------------------------------------------------

    fn pool_dims(&self, x: Var, k: usize, op: &'static str) -> Result<[usize; 4]> {
        let [n, c, h, w] = self.value(x).dims4();
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(op, format!("{h}x{w} not divisible by {k}")));
        }
        Ok([n, c, h / k, w / k])
    }

    /// Non-overlapping `k×k` max pooling.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, oh, ow] = self.pool_dims(x, k, "max_pool")?;
        let w = ow * k;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            let base = nc * oh * k * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + (i * k) * w + j * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * k + di) * w + j * k + dj;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }))
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, oh, ow] = self.pool_dims(x, k, "avg_pool")?;
        if k == 1 {
            let v = self.value(x).clone();
            return Ok(self.push(v, Op::AvgPool { x, k }));
        }
        let w = ow * k;
        let src = self.value(x).data();
        let inv = T::one() / T::of((k * k) as f64);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let base = nc * oh * k * w;
            for i in 0..oh * k {
                for j in 0..w {
                    out[nc * oh * ow + (i / k) * ow + j / k] += src[base + i * w + j];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let v = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(v, Op::AvgPool { x, k }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4();
        if f == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let src = self.value(x).data();
        let (oh, ow) = (h * f, w * f);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            for i in 0..oh {
                let row = &src[nc * h * w + (i / f) * w..nc * h * w + (i / f + 1) * w];
                for j in 0..ow {
                    out.push(row[j / f]);
                }
            }
        }
        let v = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(v, Op::UpNearest { x, f }))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers).
    pub fn upsample_bilinear(&mut self, x: Var, f: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4();
        if f == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let src = self.value(x).data();
        let (oh, ow) = (h * f, w * f);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            let p = &src[nc * h * w..(nc + 1) * h * w];
            for i in 0..oh {
                let (i0, i1, fi) = bilinear_src(i, f, h);
                for j in 0..ow {
                    let (j0, j1, fj) = bilinear_src(j, f, w);
                    let v = p[i0 * w + j0].f64() * (1.0 - fi) * (1.0 - fj)
                        + p[i0 * w + j1].f64() * (1.0 - fi) * fj
                        + p[i1 * w + j0].f64() * fi * (1.0 - fj)
                        + p[i1 * w + j1].f64() * fi * fj;
                    out.push(T::of(v));
                }
            }
        }
        let v = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(v, Op::UpBilinear { x, f }))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let [n, _, h, w] = self.value(first).dims4();
        let mut total = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4();
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", self.value(p).shape(), self.value(first).shape()),
                ));
            }
            total += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &p in parts {
                let pc = self.value(p).dims4()[1];
                out.extend_from_slice(&self.value(p).data()[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        let v = Tensor::from_vec(&[n, total, h, w], out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).channels(start, len)?;
        Ok(self.push(v, Op::SliceChannels { x, start }))
    }

    // ---- losses ------------------------------------------------------

    /// Elementwise smooth-L1 against a constant target, transition at 1.
    pub fn smooth_l1(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        let half = T::of(0.5);
        let v = self.value(x).zip_map(&target, |a, b| {
            let d = (a - b).abs();
            if d < T::one() {
                half * d * d
            } else {
                d - half
            }
        })?;
        Ok(self.push(v, Op::SmoothL1 { x, target }))
    }

    /// Elementwise binary cross-entropy of probabilities `y` against
    /// targets, with `y` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, y: Var, target: Tensor<T>, eps: f64) -> Result<Var> {
        let lo = T::of(eps);
        let hi = T::one() - lo;
        let v = self.value(y).zip_map(&target, |p, t| {
            let p = p.max(lo).min(hi);
            -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
        })?;
        Ok(self.push(v, Op::Bce { y, target, eps }))
    }

    /// Emits `hard` in the forward pass while routing gradients to `soft`.
    pub fn straight_through(&mut self, hard: Tensor<T>, soft: Var) -> Result<Var> {
        same_shape("straight_through", &hard, self.value(soft))?;
        Ok(self.push(hard, Op::StraightThrough(soft)))
    }

    /// Bilinear lookup of `c: [.., T, H, W]` at each point; returns `[P]`.
    /// Coordinates are clamped to the grid.
    pub fn sample_bilinear(&mut self, c: Var, points: &[SamplePoint]) -> Result<Var> {
        let [n, t, h, w] = self.value(c).dims4();
        if n != 1 {
            return Err(Error::shape("sample_bilinear", "batch must be 1"));
        }
        let src = self.value(c).data();
        let mut taps = Vec::with_capacity(points.len());
        let mut out = Vec::with_capacity(points.len());
        for p in points {
            if p.t >= t {
                return Err(Error::shape("sample_bilinear", format!("plane {} >= {t}", p.t)));
            }
            let r = p.row.clamp(0.0, (h - 1) as f64);
            let q = p.col.clamp(0.0, (w - 1) as f64);
            let (r0, q0) = (r.floor() as usize, q.floor() as usize);
            let (r1, q1) = ((r0 + 1).min(h - 1), (q0 + 1).min(w - 1));
            let (fr, fq) = (r - r0 as f64, q - q0 as f64);
            let base = p.t * h * w;
            let tap = BilinearTap {
                idx: [base + r0 * w + q0, base + r0 * w + q1, base + r1 * w + q0, base + r1 * w + q1],
                wts: [(1.0 - fr) * (1.0 - fq), (1.0 - fr) * fq, fr * (1.0 - fq), fr * fq],
            };
            let v: f64 = tap.idx.iter().zip(tap.wts).map(|(&i, wt)| src[i].f64() * wt).sum();
            out.push(T::of(v));
            taps.push(tap);
        }
        let v = Tensor::from_vec(&[points.len()], out)?;
        Ok(self.push(v, Op::Sample { c, taps }))
    }

    // ---- block gather / scatter --------------------------------------

    /// Copies `tile×tile` windows of `x: [1, c, h, w]` whose top-left corners
    /// are `origins` into `[B, c, tile, tile]`; cells outside the grid read 0.
    pub fn gather_tiles(&mut self, x: Var, origins: &[(isize, isize)], tile: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4();
        if n != 1 {
            return Err(Error::shape("gather_tiles", "batch must be 1"));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); origins.len() * c * tile * tile];
        for (b, &(oi, oj)) in origins.iter().enumerate() {
            for ch in 0..c {
                for u in 0..tile {
                    let i = oi + u as isize;
                    if i < 0 || i >= h as isize {
                        continue;
                    }
                    for v in 0..tile {
                        let j = oj + v as isize;
                        if j < 0 || j >= w as isize {
                            continue;
                        }
                        out[((b * c + ch) * tile + u) * tile + v] =
                            src[(ch * h + i as usize) * w + j as usize];
                    }
                }
            }
        }
        let v = Tensor::from_vec(&[origins.len(), c, tile, tile], out)?;
        Ok(self.push(v, Op::Gather { x, origins: origins.to_vec() }))
    }

    /// Writes `x: [B, c, b, b]` tiles into a zero `[1, c, h, w]` canvas at
    /// `origins`. Tiles must not overlap.
    pub fn scatter_tiles(&mut self, x: Var, origins: &[(isize, isize)], h: usize, w: usize) -> Result<Var> {
        let [nb, c, th, tw] = self.value(x).dims4();
        if nb != origins.len() || th != tw {
            return Err(Error::shape("scatter_tiles", format!("{nb} tiles for {} origins", origins.len())));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * h * w];
        for (b, &(oi, oj)) in origins.iter().enumerate() {
            for ch in 0..c {
                for u in 0..th {
                    let i = oi + u as isize;
                    if i < 0 || i >= h as isize {
                        continue;
                    }
                    for v in 0..tw {
                        let j = oj + v as isize;
                        if j < 0 || j >= w as isize {
                            continue;
                        }
                        out[(ch * h + i as usize) * w + j as usize] = src[((b * c + ch) * th + u) * tw + v];
                    }
                }
            }
        }
        let v = Tensor::from_vec(&[1, c, h, w], out)?;
        Ok(self.push(v, Op::Scatter { x, origins: origins.to_vec() }))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.scale(-T::one()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).expect("shape");
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).expect("shape");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MulBcast(x, m) => {
                let [n, c, h, w] = self.value(*x).dims4();
                let plane = h * w;
                let mv = self.value(*m).data();
                let xv = self.value(*x).data();
                let gd = g.data();
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            for (k, o) in gx.data_mut()[base..base + plane].iter_mut().enumerate() {
                                *o *= mv[b * plane + k];
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*m) {
                    let mut gm = Tensor::zeros(self.value(*m).shape());
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            for k in 0..plane {
                                gm.data_mut()[b * plane + k] += gd[base + k] * xv[base + k];
                            }
                        }
                    }
                    self.accumulate(grads, *m, gm);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulConst(a, c) => {
                self.accumulate(grads, *a, g.zip_map(c, |x, y| x * y).expect("shape"))
            }
            Op::Relu(a) => {
                let ga = g
                    .zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })
                    .expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(out, |gv, s| gv * s * (T::one() - s)).expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::LogSigmoid(a) => {
                // d/dx log σ(x) = 1 - σ(x) = σ(-x)
                let ga = g.zip_map(self.value(*a), |gv, x| gv * sigmoid(-x)).expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.value(*a).shape(), g.item());
                self.accumulate(grads, *a, ga);
            }
            Op::SumSq(a) => {
                let two_g = g.item() + g.item();
                self.accumulate(grads, *a, self.value(*a).scale(two_g));
            }
            Op::SumChannels(a) => {
                let [n, c, h, w] = self.value(*a).dims4();
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * c * plane);
                for b in 0..n {
                    for _ in 0..c {
                        ga.extend_from_slice(&g.data()[b * plane..(b + 1) * plane]);
                    }
                }
                let ga = Tensor::from_vec(self.value(*a).shape(), ga).expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::SumLast(a) => {
                let shape = self.value(*a).shape();
                let last = *shape.last().expect("non-scalar");
                let ga: Vec<T> = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, last)).collect();
                let ga = Tensor::from_vec(shape, ga).expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::MaxAll(a, idx) => {
                let mut ga = Tensor::zeros(self.value(*a).shape());
                ga.data_mut()[*idx] = g.item();
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshape(self.value(*a).shape()).expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Conv { x, w, b, geom } => {
                let s = conv::conv_shape(self.value(*x).dims4(), self.value(*w).shape(), geom).expect("shape");
                let (dx, dw, db) = conv::conv_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    &s,
                    geom,
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx).expect("shape"));
                }
                self.accumulate(grads, *w, Tensor::from_vec(self.value(*w).shape(), dw).expect("shape"));
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_vec(self.value(*b).shape(), db).expect("shape"));
                }
            }
            Op::Deconv { x, w, b, geom } => {
                let s = conv::deconv_shape(self.value(*x).dims4(), self.value(*w).shape(), geom).expect("shape");
                let (dx, dw, db) = conv::deconv_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    &s,
                    geom,
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx).expect("shape"));
                }
                self.accumulate(grads, *w, Tensor::from_vec(self.value(*w).shape(), dw).expect("shape"));
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_vec(self.value(*b).shape(), db).expect("shape"));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPool { x, k } => {
                let [n, c, h, w] = self.value(*x).dims4();
                let (oh, ow) = (h / k, w / k);
                let inv = T::one() / T::of((k * k) as f64);
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for nc in 0..n * c {
                    for i in 0..h {
                        for j in 0..w {
                            gx.data_mut()[nc * h * w + i * w + j] = g.data()[nc * oh * ow + (i / k) * ow + j / k] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::UpNearest { x, f } => {
                let [n, c, h, w] = self.value(*x).dims4();
                let (oh, ow) = (h * f, w * f);
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for nc in 0..n * c {
                    for i in 0..oh {
                        for j in 0..ow {
                            gx.data_mut()[nc * h * w + (i / f) * w + j / f] += g.data()[nc * oh * ow + i * ow + j];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::UpBilinear { x, f } => {
                let [n, c, h, w] = self.value(*x).dims4();
                let (oh, ow) = (h * f, w * f);
                let mut gx = vec![0.0f64; n * c * h * w];
                for nc in 0..n * c {
                    let base = nc * h * w;
                    for i in 0..oh {
                        let (i0, i1, fi) = bilinear_src(i, *f, h);
                        for j in 0..ow {
                            let (j0, j1, fj) = bilinear_src(j, *f, w);
                            let gv = g.data()[nc * oh * ow + i * ow + j].f64();
                            gx[base + i0 * w + j0] += gv * (1.0 - fi) * (1.0 - fj);
                            gx[base + i0 * w + j1] += gv * (1.0 - fi) * fj;
                            gx[base + i1 * w + j0] += gv * fi * (1.0 - fj);
                            gx[base + i1 * w + j1] += gv * fi * fj;
                        }
                    }
                }
                let gx = Tensor::from_vec(self.value(*x).shape(), gx.into_iter().map(T::of).collect()).expect("shape");
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).dims4()[1];
                    if self.wants(p) {
                        let gp = g.channels(offset, pc).expect("shape").reshape(self.value(p).shape()).expect("shape");
                        self.accumulate(grads, p, gp);
                    }
                    offset += pc;
                }
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.value(*x).dims4();
                let len = g.dims4()[1];
                let plane = h * w;
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    gx.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SmoothL1 { x, target } => {
                let d = self.value(*x).zip_map(target, |a, b| a - b).expect("shape");
                let gx = g
                    .zip_map(&d, |gv, d| if d.abs() < T::one() { gv * d } else { gv * d.signum() })
                    .expect("shape");
                self.accumulate(grads, *x, gx);
            }
            Op::Bce { y, target, eps } => {
                let lo = T::of(*eps);
                let hi = T::one() - lo;
                let yv = self.value(*y);
                let mut gy = Tensor::zeros(yv.shape());
                for (k, o) in gy.data_mut().iter_mut().enumerate() {
                    let p = yv.data()[k];
                    if p < lo || p > hi {
                        continue;
                    }
                    let t = target.data()[k];
                    *o = g.data()[k] * (p - t) / (p * (T::one() - p));
                }
                self.accumulate(grads, *y, gy);
            }
            Op::StraightThrough(soft) => self.accumulate(grads, *soft, g.clone()),
            Op::Sample { c, taps } => {
                let mut gc = vec![0.0f64; self.value(*c).numel()];
                for (tap, &gv) in taps.iter().zip(g.data()) {
                    for (&i, wt) in tap.idx.iter().zip(tap.wts) {
                        gc[i] += gv.f64() * wt;
                    }
                }
                let gc = Tensor::from_vec(self.value(*c).shape(), gc.into_iter().map(T::of).collect()).expect("shape");
                self.accumulate(grads, *c, gc);
            }
            Op::Gather { x, origins } => {
                let [_, c, h, w] = self.value(*x).dims4();
                let tile = g.dims4()[2];
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (b, &(oi, oj)) in origins.iter().enumerate() {
                    for ch in 0..c {
                        for u in 0..tile {
                            let i = oi + u as isize;
                            if i < 0 || i >= h as isize {
                                continue;
                            }
                            for v in 0..tile {
                                let j = oj + v as isize;
                                if j < 0 || j >= w as isize {
                                    continue;
                                }
                                gx.data_mut()[(ch * h + i as usize) * w + j as usize] +=
                                    g.data()[((b * c + ch) * tile + u) * tile + v];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Scatter { x, origins } => {
                let [_, c, h, w] = out.dims4();
                let [_, _, th, tw] = self.value(*x).dims4();
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (b, &(oi, oj)) in origins.iter().enumerate() {
                    for ch in 0..c {
                        for u in 0..th {
                            let i = oi + u as isize;
                            if i < 0 || i >= h as isize {
                                continue;
                            }
                            for v in 0..tw {
                                let j = oj + v as isize;
                                if j < 0 || j >= w as isize {
                                    continue;
                                }
                                gx.data_mut()[((b * c + ch) * th + u) * tw + v] =
                                    g.data()[(ch * h + i as usize) * w + j as usize];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}
