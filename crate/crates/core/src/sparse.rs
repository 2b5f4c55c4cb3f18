//! Block-sparse execution of attention-gated residual blocks.
//!
//! A gated block computes `y = x + B * F(x * A)`, where `A` is the binary
//! mask and `B` its expansion to whole `b x b` blocks. Outside active blocks
//! the output is exactly `x`. The sparse path gathers each active block with
//! the halo its receptive field needs, runs `F` on the stacked tiles, and
//! scatters the block interiors back.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::attention::AttentionMask;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ConvGeom, Graph, ParamStore, Padding, Real, Tensor, Var};

/// Active `b x b` blocks of a mask, sorted lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockIndex {
    pub block: usize,
    pub halo: usize,
    pub rows: usize,
    pub cols: usize,
    pub active: Vec<(usize, usize)>,
}

impl BlockIndex {
    pub fn grid_blocks(&self) -> (usize, usize) {
        (self.rows / self.block, self.cols / self.block)
    }

    /// `[1, 1, rows, cols]` indicator of cells inside active blocks.
    pub fn block_mask<T: Real>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(&[1, 1, self.rows, self.cols]);
        for &(bi, bj) in &self.active {
            for i in bi * self.block..(bi + 1) * self.block {
                for j in bj * self.block..(bj + 1) * self.block {
                    t.set4(0, 0, i, j, T::one());
                }
            }
        }
        t
    }

    /// Fraction of blocks that are active.
    pub fn active_fraction(&self) -> f64 {
        let (bh, bw) = self.grid_blocks();
        self.active.len() as f64 / (bh * bw) as f64
    }
}

/// A block is active iff any of its cells is.
pub fn mask_to_blocks(mask: &AttentionMask, block: usize, halo: usize) -> Result<BlockIndex> {
    let (rows, cols) = (mask.rows(), mask.cols());
    if block == 0 || rows % block != 0 || cols % block != 0 {
        return Err(Error::invalid(format!("block size {block} does not divide mask {rows}x{cols}")));
    }
    let mut active = Vec::new();
    for bi in 0..rows / block {
        for bj in 0..cols / block {
            let any = (bi * block..(bi + 1) * block)
                .any(|i| (bj * block..(bj + 1) * block).any(|j| mask.is_active(i, j)));
            if any {
                active.push((bi, bj));
            }
        }
    }
    Ok(BlockIndex { block, halo, rows, cols, active })
}

/// One resolution branch: average-pool by `scale`, two bias-free 3x3 convs
/// with ReLU, a 1x1 projection back to the block width, nearest upsample.
#[derive(Clone, Debug)]
pub struct Branch {
    pub scale: usize,
    pub width: usize,
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Conv2d,
}

/// Receptive radius of a branch in branch cells.
const BRANCH_RADIUS: usize = 2;

impl Branch {
    /// Halo in feature cells.
    pub fn halo(&self) -> usize {
        self.scale * BRANCH_RADIUS
    }
}

/// Parallel branches whose outputs are summed; equal to concatenating the
/// branch features and fusing them with one 1x1 convolution.
#[derive(Clone, Debug)]
pub struct CrossScaleBlock {
    pub channels: usize,
    pub branches: Vec<Branch>,
}

impl CrossScaleBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        channels: usize,
        scales: &[usize],
        widths: &[usize],
        padding: Padding,
    ) -> Self {
        let geom3 = ConvGeom { mode: padding, ..ConvGeom::new(3, 1, 1) };
        let branches = scales
            .iter()
            .zip(widths)
            .map(|(&scale, &width)| {
                let name = |l: &str| format!("{prefix}.s{scale}.{l}");
                Branch {
                    scale,
                    width,
                    conv1: Conv2d::new(store, rng, &name("conv1"), channels, width, geom3, false),
                    conv2: Conv2d::new(store, rng, &name("conv2"), width, width, geom3, false),
                    proj: Conv2d::new(store, rng, &name("proj"), width, channels, ConvGeom::new(1, 1, 0), false),
                }
            })
            .collect();
        CrossScaleBlock { channels, branches }
    }

    /// Largest branch halo in feature cells.
    pub fn halo(&self) -> usize {
        self.branches.iter().map(Branch::halo).max().unwrap_or(0)
    }

    fn check(&self, g: &Graph<impl Real>, x: Var) -> Result<[usize; 4]> {
        let d = g.value(x).dims4();
        if d[1] != self.channels {
            return Err(Error::shape("cross_scale_block", format!("expected {} channels, got {}", self.channels, d[1])));
        }
        for b in &self.branches {
            if d[2] % b.scale != 0 || d[3] % b.scale != 0 {
                return Err(Error::shape("cross_scale_block", format!("{}x{} not divisible by {}", d[2], d[3], b.scale)));
            }
        }
        Ok(d)
    }

    /// `F(x)` on the full grid.
    pub fn residual<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.check(g, x)?;
        let mut acc: Option<Var> = None;
        for b in &self.branches {
            let xs = if b.scale > 1 { g.avg_pool(x, b.scale)? } else { x };
            let h = b.conv1.forward(g, p, xs)?;
            let h = g.relu(h);
            let h = b.conv2.forward(g, p, h)?;
            let h = g.relu(h);
            let o = b.proj.forward(g, p, h)?;
            let o = if b.scale > 1 { g.upsample_nearest(o, b.scale)? } else { o };
            acc = Some(match acc {
                Some(a) => g.add(a, o)?,
                None => o,
            });
        }
        acc.ok_or_else(|| Error::invalid("cross-scale block without branches"))
    }

    /// `x + F(x)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let f = self.residual(g, p, x)?;
        g.add(x, f)
    }

    /// `x + B * F(x * A)` with full-grid arithmetic. `a` is the `[1, 1, h, w]`
    /// mask (hard forward value, straight-through gradient).
    pub fn forward_gated<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, a: Var, idx: &BlockIndex) -> Result<Var> {
        let xm = g.mul_bcast(x, a)?;
        let f = self.residual(g, p, xm)?;
        let bm = g.constant(idx.block_mask());
        let f = g.mul_bcast(f, bm)?;
        g.add(x, f)
    }

    /// Same result as [`forward_gated`](Self::forward_gated), evaluating `F`
    /// only on gathered active blocks.
    pub fn forward_sparse<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, a: Var, idx: &BlockIndex) -> Result<Var> {
        let [_, _, h, w] = self.check(g, x)?;
        if (h, w) != (idx.rows, idx.cols) {
            return Err(Error::shape("sparse_residual_block", format!("mask {}x{} vs input {h}x{w}", idx.rows, idx.cols)));
        }
        for b in &self.branches {
            if idx.block % b.scale != 0 {
                return Err(Error::invalid(format!("block {} not divisible by branch scale {}", idx.block, b.scale)));
            }
            if b.conv1.geom.mode != Padding::Zero {
                return Err(Error::invalid("sparse execution needs zero padding"));
            }
        }
        if idx.active.is_empty() {
            return Ok(x);
        }
        let xm = g.mul_bcast(x, a)?;
        let bs = idx.block;
        let blocks: Vec<(isize, isize)> =
            idx.active.iter().map(|&(bi, bj)| ((bi * bs) as isize, (bj * bs) as isize)).collect();
        let valid = ConvGeom::new(3, 1, 0);
        let mut acc: Option<Var> = None;
        for b in &self.branches {
            let s = b.scale;
            let halo = b.halo() as isize;
            let tile = bs + 2 * b.halo();
            let origins: Vec<(isize, isize)> = blocks.iter().map(|&(i, j)| (i - halo, j - halo)).collect();
            let t = g.gather_tiles(xm, &origins, tile)?;
            let t = if s > 1 { g.avg_pool(t, s)? } else { t };
            let h1 = g.conv2d(t, p.var(b.conv1.weight), None, valid)?;
            let h1 = g.relu(h1);
            // Zero the first-layer activations that fall outside the grid,
            // as zero padding would.
            let side = tile / s - 2;
            let (gh, gw) = ((h / s) as isize, (w / s) as isize);
            let mut inside = Tensor::<T>::zeros(&[origins.len(), 1, side, side]);
            for (k, &(oi, oj)) in origins.iter().enumerate() {
                for u in 0..side {
                    for v in 0..side {
                        let (i, j) = (oi / s as isize + 1 + u as isize, oj / s as isize + 1 + v as isize);
                        if i >= 0 && j >= 0 && i < gh && j < gw {
                            inside.set4(k, 0, u, v, T::one());
                        }
                    }
                }
            }
            let inside = g.constant(inside);
            let h1 = g.mul_bcast(h1, inside)?;
            let h2 = g.conv2d(h1, p.var(b.conv2.weight), None, valid)?;
            let h2 = g.relu(h2);
            let o = b.proj.forward(g, p, h2)?;
            let o = if s > 1 { g.upsample_nearest(o, s)? } else { o };
            let y = g.scatter_tiles(o, &blocks, h, w)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        let f = acc.ok_or_else(|| Error::invalid("cross-scale block without branches"))?;
        g.add(x, f)
    }

    /// Per-layer FLOPs on an `h x w` grid. Sparse counts cover, per layer, the
    /// union over active blocks of the block dilated by the receptive radius
    /// still ahead of that layer; `gathered` counts the per-tile work of the
    /// gather executor, which recomputes shared halos.
    pub fn flops(&self, prefix: &str, h: usize, w: usize, idx: Option<&BlockIndex>) -> Vec<LayerFlops> {
        let mut out = Vec::new();
        for b in &self.branches {
            let s = b.scale;
            let (hs, ws) = (h / s, w / s);
            let layers = [(&b.conv1, "conv1", 1usize), (&b.conv2, "conv2", 0), (&b.proj, "proj", 0)];
            for (conv, name, dilate) in layers {
                let per_cell = 2 * (conv.geom.kernel * conv.geom.kernel * conv.cin * conv.cout) as u64;
                let dense = per_cell * (hs * ws) as u64;
                let (sparse, gathered, nb) = match idx {
                    None => (dense, dense, 0),
                    Some(idx) => {
                        let cells = dilated_union(idx, s, dilate, hs, ws);
                        let side = idx.block / s + 2 * dilate;
                        let tiles = (idx.active.len() * side * side) as u64;
                        (per_cell * cells as u64, per_cell * tiles, idx.active.len())
                    }
                };
                out.push(LayerFlops {
                    name: format!("{prefix}.s{s}.{name}"),
                    dense,
                    sparse,
                    gathered,
                    active_blocks: nb,
                    gated: true,
                });
            }
        }
        out
    }
}

/// Cells of an `hs x ws` branch grid within `dilate` of an active block.
fn dilated_union(idx: &BlockIndex, scale: usize, dilate: usize, hs: usize, ws: usize) -> usize {
    let mut mark = vec![false; hs * ws];
    let side = idx.block / scale;
    for &(bi, bj) in &idx.active {
        let (i0, j0) = ((bi * side).saturating_sub(dilate), (bj * side).saturating_sub(dilate));
        let (i1, j1) = (((bi + 1) * side + dilate).min(hs), ((bj + 1) * side + dilate).min(ws));
        for i in i0..i1 {
            for j in j0..j1 {
                mark[i * ws + j] = true;
            }
        }
    }
    mark.iter().filter(|&&m| m).count()
}

/// FLOPs of one convolution layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    pub name: String,
    pub dense: u64,
    pub sparse: u64,
    pub gathered: u64,
    pub active_blocks: usize,
    pub gated: bool,
}

impl LayerFlops {
    pub fn ungated(name: impl Into<String>, flops: u64) -> Self {
        LayerFlops { name: name.into(), dense: flops, sparse: flops, gathered: flops, active_blocks: 0, gated: false }
    }
}

/// Dense versus sparse FLOPs of a backbone under one mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
    pub dense_flops: u64,
    pub sparse_flops: u64,
    pub sparsity: f64,
}

impl FlopReport {
    pub fn new(layers: Vec<LayerFlops>, sparsity: f64) -> Self {
        let dense_flops = layers.iter().map(|l| l.dense).sum();
        let sparse_flops = layers.iter().map(|l| l.sparse).sum();
        FlopReport { layers, dense_flops, sparse_flops, sparsity }
    }

    pub fn ratio(&self) -> f64 {
        self.sparse_flops as f64 / self.dense_flops as f64
    }

    /// Sparse over dense, restricted to gated layers.
    pub fn gated_ratio(&self) -> f64 {
        let (d, s) = self
            .layers
            .iter()
            .filter(|l| l.gated)
            .fold((0u64, 0u64), |(d, s), l| (d + l.dense, s + l.sparse));
        s as f64 / d as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["layer", "dense", "sparse", "active_blocks", "gathered"])?;
        for l in &self.layers {
            wr.write_record([
                l.name.clone(),
                l.dense.to_string(),
                l.sparse.to_string(),
                l.active_blocks.to_string(),
                l.gathered.to_string(),
            ])?;
        }
        wr.write_record([
            "total".to_string(),
            self.dense_flops.to_string(),
            self.sparse_flops.to_string(),
            String::new(),
            self.layers.iter().map(|l| l.gathered).sum::<u64>().to_string(),
        ])?;
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

#[cfg(test)]
mod tests;
