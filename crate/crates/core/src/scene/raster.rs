use super::lidar::simulate_with;
use super::*;
use crate::nn::Tensor;

/// Leading bytes of an exported BEV tensor.
pub const BEV_MAGIC: &[u8; 4] = b"SBEV";

/// Per-cell map layers at input resolution, row-major.
pub(crate) struct MapLayers {
    pub cols: usize,
    pub surface: Vec<bool>,
    pub centerline: Vec<bool>,
    pub route: Vec<bool>,
}

impl MapLayers {
    pub fn surface_at(&self, grid: &Grid, p: Point) -> bool {
        grid.cell_of(p).is_some_and(|(i, j)| self.surface[i * self.cols + j])
    }
}

/// Marks every cell whose center lies within `radius` of the polyline.
fn mark_polyline(grid: &Grid, rows: usize, cols: usize, line: &[Point], radius: f64, out: &mut [bool]) {
    let res = grid.resolution;
    for seg in line.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let lo_x = a[0].min(b[0]) - radius;
        let hi_x = a[0].max(b[0]) + radius;
        let lo_y = a[1].min(b[1]) - radius;
        let hi_y = a[1].max(b[1]) + radius;
        if hi_x < grid.x_min || lo_x > grid.x_max() || hi_y < grid.y_min || lo_y > grid.y_max() {
            continue;
        }
        let span = |lo: f64, hi: f64, min: f64, n: usize| {
            let a = ((lo - min) / res - 0.5).ceil().max(0.0) as usize;
            let b = ((hi - min) / res - 0.5).floor().min(n as f64 - 1.0);
            if b < 0.0 { a..a } else { a..(b as usize + 1) }
        };
        for i in span(lo_x, hi_x, grid.x_min, rows) {
            for j in span(lo_y, hi_y, grid.y_min, cols) {
                let idx = i * cols + j;
                if !out[idx] && point_segment_distance(grid.cell_center(i, j), a, b) <= radius {
                    out[idx] = true;
                }
            }
        }
    }
}

pub(crate) fn map_layers(scene: &Scene) -> Result<MapLayers> {
    let grid = &scene.grid;
    let (rows, cols) = (grid.rows()?, grid.cols()?);
    let n = rows * cols;
    let mut layers = MapLayers { cols, surface: vec![false; n], centerline: vec![false; n], route: vec![false; n] };
    for (k, lane) in scene.lanes.iter().enumerate() {
        mark_polyline(grid, rows, cols, &lane.centerline, lane.width / 2.0, &mut layers.surface);
        mark_polyline(grid, rows, cols, &lane.centerline, grid.resolution / 2.0, &mut layers.centerline);
        if k == scene.ego_lane {
            mark_polyline(grid, rows, cols, &lane.centerline, lane.width / 2.0, &mut layers.route);
        }
    }
    Ok(layers)
}

/// Height slice of a point.
pub fn height_slice(z: f64) -> usize {
    SLICE_EDGES.iter().take_while(|&&e| z >= e).count()
}

/// Network input: `HEIGHT_SLICES * PAST_SWEEPS` occupancy channels followed
/// by `MAP_CHANNELS` map channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BevInput {
    pub tensor: Tensor<f32>,
}

impl BevInput {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn occupancy(&self) -> &[f32] {
        let [_, _, h, w] = self.tensor.dims4();
        &self.tensor.data()[..HEIGHT_SLICES * PAST_SWEEPS * h * w]
    }

    pub fn map(&self) -> &[f32] {
        let [_, _, h, w] = self.tensor.dims4();
        &self.tensor.data()[HEIGHT_SLICES * PAST_SWEEPS * h * w..]
    }

    /// `[1, C, H, W]` batch view.
    pub fn batch(&self) -> Tensor<f32> {
        let [_, c, h, w] = self.tensor.dims4();
        self.tensor.clone().reshape(&[1, c, h, w]).expect("same element count")
    }

    /// Magic, rank and dims as little-endian `u32`, then `f32` data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.tensor.shape();
        let mut out = Vec::with_capacity(8 + 4 * shape.len() + 4 * self.tensor.numel());
        out.extend_from_slice(BEV_MAGIC);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::Format { what: "bev tensor", detail: d.to_string() };
        let word = |k: usize| -> Result<u32> {
            let s = bytes.get(4 + 4 * k..8 + 4 * k).ok_or_else(|| bad("truncated header"))?;
            Ok(u32::from_le_bytes(s.try_into().unwrap()))
        };
        if bytes.get(..4) != Some(BEV_MAGIC) {
            return Err(bad("missing magic"));
        }
        let rank = word(0)? as usize;
        if rank > 4 {
            return Err(bad("rank above 4"));
        }
        let shape: Vec<usize> = (1..=rank).map(|k| word(k).map(|v| v as usize)).collect::<Result<_>>()?;
        let body = &bytes[4 + 4 * (rank + 1)..];
        let n: usize = shape.iter().product();
        if body.len() != 4 * n {
            return Err(bad(&format!("expected {} payload bytes, found {}", 4 * n, body.len())));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(BevInput { tensor: Tensor::from_vec(&shape, data)? })
    }
}

/// Bins per-sweep point sets into `HEIGHT_SLICES * sweeps.len()` binary
/// occupancy channels.
pub fn rasterize_points(grid: &Grid, sweeps: &[Vec<LidarPoint>]) -> Result<Tensor<f32>> {
    let (rows, cols) = (grid.rows()?, grid.cols()?);
    let mut t = Tensor::zeros(&[HEIGHT_SLICES * sweeps.len(), rows, cols]);
    for (k, pts) in sweeps.iter().enumerate() {
        for p in pts {
            if let Some((i, j)) = grid.cell_of([p.x, p.y]) {
                t.set4(0, k * HEIGHT_SLICES + height_slice(p.z), i, j, 1.0);
            }
        }
    }
    Ok(t)
}

/// Full input tensor for a scene.
pub fn rasterize(scene: &Scene) -> Result<BevInput> {
    let grid = &scene.grid;
    let (rows, cols) = grid.dims()?;
    let maps = map_layers(scene)?;
    let sweeps = (0..PAST_SWEEPS).map(|k| simulate_with(scene, k, &maps)).collect::<Result<Vec<_>>>()?;
    let occ = rasterize_points(grid, &sweeps)?;
    let mut data = occ.into_data();
    for layer in [&maps.surface, &maps.centerline, &maps.route] {
        data.extend(layer.iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
    }
    Ok(BevInput { tensor: Tensor::from_vec(&[INPUT_CHANNELS, rows, cols], data)? })
}

/// Box offsets relative to an anchor:
/// `[(xa - x) / wa, (ya - y) / ha, ln(w / wa), ln(h / ha), sin(ta - t), cos(ta - t)]`.
pub fn encode_delta(anchor: &OrientedBox, b: &OrientedBox) -> [f64; 6] {
    let dth = anchor.heading - b.heading;
    [
        (anchor.cx - b.cx) / anchor.length,
        (anchor.cy - b.cy) / anchor.width,
        (b.length / anchor.length).ln(),
        (b.width / anchor.width).ln(),
        dth.sin(),
        dth.cos(),
    ]
}

pub fn decode_delta(anchor: &OrientedBox, d: &[f64; 6]) -> OrientedBox {
    OrientedBox::new(
        anchor.cx - d[0] * anchor.length,
        anchor.cy - d[1] * anchor.width,
        anchor.length * d[2].exp(),
        anchor.width * d[3].exp(),
        crate::geometry::wrap_angle(anchor.heading - d[4].atan2(d[5])),
    )
}

/// Detection targets on the feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    /// `[1, h, w]` binary scores.
    pub score: Tensor<f32>,
    /// `[6 (T + 1), h, w]` box offsets for steps `0..=T`; zero where unowned.
    pub regression: Tensor<f32>,
    /// Generating actor index per cell, row-major.
    pub owner: Vec<Option<usize>>,
    pub rows: usize,
    pub cols: usize,
}

pub const REG_CHANNELS: usize = 6 * (FUTURE_STEPS + 1);

impl Labels {
    pub fn positives(&self) -> usize {
        self.owner.iter().filter(|o| o.is_some()).count()
    }
}

/// Anchor box at feature cell `(i, j)`.
pub fn anchor_at(grid: &Grid, i: usize, j: usize) -> OrientedBox {
    let c = grid.cell_center_scaled(i, j, FEATURE_STRIDE);
    OrientedBox::new(c[0], c[1], ANCHOR_LENGTH, ANCHOR_WIDTH, 0.0)
}

/// A feature cell is positive when its center lies inside an actor box. An
/// actor too small to cover any center claims the cell holding its center.
pub fn rasterize_labels(scene: &Scene) -> Result<Labels> {
    let (rows, cols) = scene.grid.dims()?;
    let (h, w) = (rows / FEATURE_STRIDE, cols / FEATURE_STRIDE);
    let mut owner = vec![None; h * w];
    for (k, actor) in scene.actors.iter().enumerate() {
        let b = actor.bbox();
        let mut covered = false;
        for i in 0..h {
            for j in 0..w {
                if owner[i * w + j].is_none() && b.contains(scene.grid.cell_center_scaled(i, j, FEATURE_STRIDE)) {
                    owner[i * w + j] = Some(k);
                    covered = true;
                }
            }
        }
        if !covered {
            if let Some((i, j)) = scene.grid.cell_of_scaled(actor.center, FEATURE_STRIDE) {
                owner[i * w + j].get_or_insert(k);
            }
        }
    }
    let mut score = Tensor::zeros(&[1, h, w]);
    let mut regression = Tensor::zeros(&[REG_CHANNELS, h, w]);
    for i in 0..h {
        for j in 0..w {
            let Some(k) = owner[i * w + j] else { continue };
            score.set4(0, 0, i, j, 1.0);
            let anchor = anchor_at(&scene.grid, i, j);
            for t in 0..=FUTURE_STEPS {
                let d = encode_delta(&anchor, &scene.actors[k].box_at_step(t));
                for (c, v) in d.iter().enumerate() {
                    regression.set4(0, 6 * t + c, i, j, *v as f32);
                }
            }
        }
    }
    Ok(Labels { score, regression, owner, rows: h, cols: w })
}

/// Lane-surface flag per input cell, row-major.
pub fn lane_surface(scene: &Scene) -> Result<Vec<bool>> {
    Ok(map_layers(scene)?.surface)
}
