//! Two-stage training, evaluation, sparsity sweeps and raster output.
//!
//! Everything here is single-threaded and seeded, so a run is a pure
//! function of its [`RunConfig`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{baseline_mask, gumbel_tensor, AttentionMask, MaskSource, DEFAULT_TEMPERATURE};
use crate::backbone::{BackboneConfig, Exec, Gate, Model};
use crate::error::{Error, Result};
use crate::eval::{
    attended_coverage, decode_detections, nms, MetricsReport, Membership, SceneEval, NMS_IOU, SCORE_THRESHOLD,
};
use crate::geometry::Pose;
use crate::losses::{
    cls_loss_map, planning_loss, reg_loss_map, reweight, save_loss_csv, task_margins, total_loss, LossParts,
    LossRecord, LossWeights,
};
use crate::nn::{load_checkpoint, save_checkpoint, Adam, Graph, ParamStore, Tensor};
use crate::planner::{plan, sample_trajectories, EgoState, PlannerConfig};
use crate::scene::{
    ego_box, generate_scene_in, lane_surface, rasterize, rasterize_labels, Difficulty, Grid, Labels, Scene,
    FEATURE_STRIDE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// No attention; all blocks run densely.
    Dense,
    /// Attention and backbone trained together from a dense checkpoint.
    Joint,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Stage::Dense),
            "joint" => Ok(Stage::Joint),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Input cells per side; the metric extent is fixed.
    pub grid_cells: usize,
    pub stage: Stage,
    /// May be fractional.
    pub epochs: f64,
    pub lr: f64,
    /// Epoch fractions after which the rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Sampled negatives per scene in the planning loss.
    pub negatives: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub mask: MaskSource,
    pub temperature: f64,
    /// Perturb the scorer logits with Gumbel noise while training.
    pub gumbel: bool,
    pub membership: Membership,
    pub loss: LossWeights,
    pub backbone: BackboneConfig,
    pub planner: PlannerConfig,
    /// Dense checkpoint the joint stage starts from.
    pub pretrained: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train_scenes: 2000,
            eval_scenes: 500,
            grid_cells: 96,
            stage: Stage::Dense,
            epochs: 2.0,
            lr: 1e-4,
            lr_milestones: vec![1.0, 1.6],
            lr_decay: 0.1,
            batch_size: 4,
            negatives: 32,
            max_steps: None,
            mask: MaskSource::Learned,
            temperature: DEFAULT_TEMPERATURE,
            gumbel: true,
            membership: Membership::CenterCell,
            loss: LossWeights::default(),
            backbone: BackboneConfig::default(),
            planner: PlannerConfig::default(),
            pretrained: None,
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn grid(&self) -> Grid {
        Grid::square(self.grid_cells)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train_scenes == 0 || self.batch_size == 0 || self.negatives == 0 {
            return bad("train_scenes, batch_size and negatives must be positive".into());
        }
        if !(self.epochs > 0.0 && self.epochs.is_finite()) {
            return bad(format!("epochs must be positive, got {}", self.epochs));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0) {
            return bad(format!("bad learning rate {} / decay {}", self.lr, self.lr_decay));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.grid_cells % 16 != 0 {
            return bad(format!("grid_cells {} must be a multiple of 16", self.grid_cells));
        }
        self.loss.validate()?;
        self.backbone.validate()?;
        if self.stage == Stage::Joint {
            match &self.pretrained {
                None => return bad("joint stage needs a pretrained dense checkpoint".into()),
                Some(p) if !p.exists() => return bad(format!("pretrained checkpoint {} does not exist", p.display())),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Optimizer steps in one epoch.
    pub fn steps_per_epoch(&self) -> usize {
        self.train_scenes.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let n = (self.epochs * self.steps_per_epoch() as f64).ceil() as usize;
        self.max_steps.map_or(n, |m| n.min(m))
    }
}

/// Step learning rate: `base * decay^k` with `k` the number of milestones
/// reached at `progress` epochs.
pub fn learning_rate(base: f64, milestones: &[f64], decay: f64, progress: f64) -> f64 {
    let k = milestones.iter().filter(|&&m| progress >= m).count();
    base * decay.powi(k as i32)
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Deterministic scene list; scenes are generated on demand and cycle
/// through the difficulty levels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub grid: Grid,
    pub seed: u64,
    pub split: Split,
    pub len: usize,
}

impl Dataset {
    pub fn new(cfg: &RunConfig, split: Split) -> Self {
        let len = match split {
            Split::Train => cfg.train_scenes,
            Split::Eval => cfg.eval_scenes,
        };
        Dataset { grid: cfg.grid(), seed: cfg.seed, split, len }
    }

    pub fn scene_seed(&self, i: usize) -> u64 {
        let tag = match self.split {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Eval => 0x6576_616c_0000_0000,
        };
        mix(mix(self.seed ^ tag).wrapping_add(i as u64))
    }

    pub fn scene(&self, i: usize) -> Scene {
        generate_scene_in(self.scene_seed(i), Difficulty::ALL[i % 3], self.grid)
    }
}

/// A scene with its network input and detection targets.
pub struct Sample {
    pub scene: Scene,
    /// `[1, C, H, W]`.
    pub input: Tensor<f32>,
    pub labels: Labels,
}

impl Sample {
    pub fn new(scene: Scene) -> Result<Self> {
        let input = rasterize(&scene)?.batch();
        let labels = rasterize_labels(&scene)?;
        Ok(Sample { scene, input, labels })
    }
}

/// The mask a run gates with, or `None` for plain dense blocks.
fn fixed_mask(source: MaskSource, stage: Stage, scene: &Scene) -> Result<Option<AttentionMask>> {
    match (stage, source) {
        (Stage::Dense, _) | (_, MaskSource::Learned) => Ok(None),
        (Stage::Joint, s) => baseline_mask(s, scene).map(Some),
    }
}

/// Loss values of one scene.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub plan: f64,
    pub cls: f64,
    pub reg: f64,
    /// `sum(A)`.
    pub attn: f64,
    pub sparsity: f64,
    pub total: f64,
}

/// Builds the full objective of one scene on `g` and returns its value
/// and parameter gradients.
pub fn scene_gradients(
    model: &Model,
    store: &ParamStore<f32>,
    cfg: &RunConfig,
    sample: &Sample,
    rng: &mut ChaCha8Rng,
) -> Result<(StepLosses, Vec<Tensor<f32>>)> {
    let mut g = Graph::<f32>::new();
    let p = store.bind(&mut g);
    let x = g.constant(sample.input.clone());
    let fixed = fixed_mask(cfg.mask, cfg.stage, &sample.scene)?;
    let (fh, fw) = (sample.labels.rows, sample.labels.cols);
    let noise = (cfg.stage == Stage::Joint && cfg.mask == MaskSource::Learned && cfg.gumbel)
        .then(|| (gumbel_tensor::<f32, _>(rng, &[1, 1, fh, fw]), gumbel_tensor::<f32, _>(rng, &[1, 1, fh, fw])));
    let gate = match (&fixed, cfg.stage) {
        (Some(m), _) => Gate::Fixed(m),
        (None, Stage::Joint) => Gate::Learned { noise: noise.as_ref().map(|(a, b)| (a, b)), temperature: cfg.temperature },
        (None, Stage::Dense) => Gate::None,
    };
    let out = model.forward(&mut g, &p, x, gate, Exec::Sparse)?;

    let cls = cls_loss_map(&mut g, out.scores, &sample.labels)?;
    let cls = reweight(&mut g, cls, out.mask_var, cfg.loss.gamma0, cfg.loss.gamma1)?;
    let reg = reg_loss_map(&mut g, out.regression, &sample.labels)?;
    let reg = reweight(&mut g, reg, out.mask_var, cfg.loss.gamma0, cfg.loss.gamma1)?;

    let state = EgoState::from_scene(&sample.scene);
    let negatives: Vec<Vec<Pose>> =
        sample_trajectories(state, cfg.negatives, &cfg.planner, rng).into_iter().map(|t| t.waypoints).collect();
    let gt = sample.scene.ego_future();
    let margins = task_margins(gt, &negatives, Some(&sample.scene), cfg.loss.v_penalty)?;
    let plan_l = planning_loss(&mut g, out.cost, &sample.scene.grid, gt, &negatives, &margins)?;

    let attn = match (&out.attention, cfg.stage) {
        (Some(a), Stage::Joint) => Some(g.sum(a.hard)),
        _ => None,
    };
    let parts = LossParts { plan: plan_l, cls, reg, attn };
    let total = total_loss(&mut g, &parts, &cfg.loss, &p)?;
    let v = |var| g.value(var).item() as f64;
    let losses = StepLosses {
        plan: v(plan_l),
        cls: v(cls),
        reg: v(reg),
        attn: attn.map_or(0.0, v),
        sparsity: out.mask.as_ref().map_or(0.0, |m| m.sparsity()),
        total: v(total),
    };
    let grads = g.backward(total)?;
    Ok((losses, store.collect_grads(&p, &grads)))
}

/// Result of [`train`].
pub struct Trained {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub records: Vec<LossRecord>,
    /// Final checkpoint, when a run directory was written.
    pub checkpoint: Option<PathBuf>,
}

/// Checkpoint payload: the run configuration that produced the weights.
fn checkpoint_text(cfg: &RunConfig) -> String {
    cfg.to_toml()
}

fn dump_batch(cfg: &RunConfig, step: usize, seeds: &[u64], losses: &[StepLosses]) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.run_dir).map_err(|e| Error::io(&cfg.run_dir, e))?;
    let path = cfg.run_dir.join(format!("nan_step{step}.json"));
    let rows: Vec<serde_json::Value> = seeds
        .iter()
        .zip(losses)
        .map(|(s, l)| {
            serde_json::json!({
                "scene_seed": s, "plan": l.plan, "cls": l.cls, "reg": l.reg, "attn": l.attn, "total": l.total,
            })
        })
        .collect();
    let body = serde_json::json!({ "step": step, "batch": rows });
    std::fs::write(&path, serde_json::to_string_pretty(&body).expect("json")).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Builds a model for `cfg`, loading the pretrained checkpoint in the
/// joint stage.
pub fn init_model(cfg: &RunConfig) -> Result<(Model, ParamStore<f32>)> {
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&cfg.backbone, &mut store, cfg.seed)?;
    if cfg.stage == Stage::Joint {
        let path = cfg.pretrained.as_ref().ok_or_else(|| Error::Config("joint stage needs a pretrained checkpoint".into()))?;
        let (pre, text) = load_checkpoint(path)?;
        check_backbone(&cfg.backbone, &text)?;
        store.load_from(&pre)?;
    }
    Ok((model, store))
}

/// Adam with the step schedule, gradient accumulation over the batch and
/// a checkpoint at every epoch boundary. Writes nothing when `write` is
/// false.
pub fn train(cfg: &RunConfig, write: bool) -> Result<Trained> {
    cfg.validate()?;
    let (model, mut store) = init_model(cfg)?;
    let data = Dataset::new(cfg, Split::Train);
    let mut adam = Adam::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0x5eed));
    let per_epoch = cfg.steps_per_epoch();
    let total = cfg.total_steps();
    if write {
        std::fs::create_dir_all(&cfg.run_dir).map_err(|e| Error::io(&cfg.run_dir, e))?;
        let snap = cfg.run_dir.join("config.toml");
        std::fs::write(&snap, cfg.to_toml()).map_err(|e| Error::io(&snap, e))?;
    }
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(total);
    let mut checkpoint = None;
    for step in 0..total {
        let epoch = step / per_epoch;
        let in_epoch = step % per_epoch;
        if in_epoch == 0 {
            order = (0..data.len).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed.wrapping_add(epoch as u64))));
        }
        let lr = learning_rate(cfg.lr, &cfg.lr_milestones, cfg.lr_decay, step as f64 / per_epoch as f64);
        let batch = &order[in_epoch * cfg.batch_size..((in_epoch + 1) * cfg.batch_size).min(data.len)];
        let mut acc: Option<Vec<Tensor<f32>>> = None;
        let mut parts = Vec::with_capacity(batch.len());
        for &i in batch {
            let sample = Sample::new(data.scene(i))?;
            let (l, grads) = scene_gradients(&model, &store, cfg, &sample, &mut rng)?;
            parts.push(l);
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let mut grads = acc.expect("non-empty batch");
        let inv = 1.0 / batch.len() as f32;
        grads.iter_mut().for_each(|g| *g = g.scale(inv));
        let n = parts.len() as f64;
        let mean = |f: fn(&StepLosses) -> f64| parts.iter().map(f).sum::<f64>() / n;
        let rec = LossRecord {
            step,
            l_plan: mean(|l| l.plan),
            l_cls: mean(|l| l.cls),
            l_reg: mean(|l| l.reg),
            l_attn: mean(|l| l.attn),
            sparsity: mean(|l| l.sparsity),
            total: mean(|l| l.total),
            lr,
        };
        if !rec.total.is_finite() || !grads.iter().all(Tensor::all_finite) {
            let seeds: Vec<u64> = batch.iter().map(|&i| data.scene_seed(i)).collect();
            let path = dump_batch(cfg, step, &seeds, &parts)?;
            return Err(Error::Numeric(format!("non-finite loss or gradient at step {step}; batch dumped to {}", path.display())));
        }
        adam.step(&mut store, &grads, lr);
        records.push(rec);
        let epoch_done = in_epoch + 1 == per_epoch;
        if write && (epoch_done || step + 1 == total) {
            let name = if step + 1 == total { "model.ckpt".to_string() } else { format!("epoch{}.ckpt", epoch + 1) };
            let path = cfg.run_dir.join(name);
            save_checkpoint(&path, &store, &checkpoint_text(cfg))?;
            checkpoint = Some(path);
        }
    }
    if write {
        save_loss_csv(&cfg.run_dir.join("losses.csv"), &records)?;
    }
    Ok(Trained { model, store, records, checkpoint })
}

/// Line diff of two config texts, `-` for the checkpoint and `+` for the
/// run.
pub fn config_diff(checkpoint: &str, run: &str) -> String {
    let a: Vec<&str> = checkpoint.lines().collect();
    let b: Vec<&str> = run.lines().collect();
    let mut out = String::new();
    for l in &a {
        if !b.contains(l) {
            let _ = writeln!(out, "- {l}");
        }
    }
    for l in &b {
        if !a.contains(l) {
            let _ = writeln!(out, "+ {l}");
        }
    }
    out
}

/// Rejects a checkpoint whose backbone differs from `expected`.
fn check_backbone(expected: &BackboneConfig, checkpoint_text: &str) -> Result<()> {
    let saved = match RunConfig::from_toml(checkpoint_text) {
        Ok(r) => r.backbone,
        Err(_) => BackboneConfig::from_toml(checkpoint_text)?,
    };
    if &saved != expected {
        return Err(Error::Config(format!(
            "checkpoint backbone does not match the run config:\n{}",
            config_diff(&saved.to_toml(), &expected.to_toml())
        )));
    }
    Ok(())
}

/// Loads weights for `cfg` from `path`, checking the backbone matches.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Model, ParamStore<f32>)> {
    let (saved, text) = load_checkpoint(path)?;
    check_backbone(&cfg.backbone, &text)?;
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&cfg.backbone, &mut store, cfg.seed)?;
    store.load_from(&saved)?;
    Ok((model, store))
}

/// Network outputs and plan for one scene.
pub struct Inference {
    pub mask: AttentionMask,
    pub plan: Vec<Pose>,
    pub detections: Vec<crate::eval::Detection>,
    pub flops: u64,
    /// `[1, T, H, W]`.
    pub cost: Tensor<f32>,
}

/// Runs the model on `scene` with the mask from `source` (no noise) and
/// plans over the predicted cost volume.
pub fn infer(model: &Model, store: &ParamStore<f32>, cfg: &RunConfig, scene: &Scene, source: MaskSource) -> Result<Inference> {
    let sample_input = rasterize(scene)?.batch();
    let [_, _, h, w] = sample_input.dims4();
    let mut g = Graph::<f32>::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(sample_input);
    let fixed = match source {
        MaskSource::Learned => None,
        s => Some(baseline_mask(s, scene)?),
    };
    let gate = match &fixed {
        Some(m) => Gate::Fixed(m),
        None => Gate::Learned { noise: None, temperature: cfg.temperature },
    };
    let out = model.forward(&mut g, &p, x, gate, Exec::Sparse)?;
    let mask = out.mask.clone().expect("gated forward records a mask");
    let dets = decode_detections(g.value(out.scores), g.value(out.regression), &scene.grid, SCORE_THRESHOLD)?;
    let detections = nms(dets, NMS_IOU);
    let cost = g.value(out.cost).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(scene.seed ^ 0x706c_616e));
    let result = plan(EgoState::from_scene(scene), &cost, &scene.grid, &cfg.planner, &mut rng)?;
    // A dense mask gates nothing, so it costs the ungated backbone.
    let counted = if source == MaskSource::Dense { None } else { Some(&mask) };
    let flops = model.flops(h, w, counted)?.sparse_flops;
    Ok(Inference { mask, plan: result.trajectory.waypoints, detections, flops, cost })
}

/// Metrics over a scene set, plus the mean share of actors inside the
/// mask (over scenes that have actors).
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub coverage: f64,
    pub scenes: Vec<SceneEval>,
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    cfg: &RunConfig,
    data: &Dataset,
    source: MaskSource,
    label: &str,
) -> Result<Evaluation> {
    let mut scenes = Vec::with_capacity(data.len);
    let mut flops = 0u128;
    let (mut cov, mut cov_n) = (0.0, 0usize);
    for i in 0..data.len {
        let scene = data.scene(i);
        let inf = infer(model, store, cfg, &scene, source)?;
        flops += inf.flops as u128;
        if let Some(c) = attended_coverage(&inf.mask, &scene, cfg.membership) {
            cov += c;
            cov_n += 1;
        }
        scenes.push(SceneEval::new(&scene, &inf.plan, inf.detections, &inf.mask, cfg.membership)?);
    }
    let mean_flops = if data.len == 0 { 0 } else { (flops / data.len as u128) as u64 };
    let report = MetricsReport::aggregate(label, &scenes, mean_flops);
    Ok(Evaluation { report, coverage: if cov_n == 0 { 0.0 } else { cov / cov_n as f64 }, scenes })
}

/// Evaluates the checkpoint at `path` on the held-out split of `cfg`.
pub fn evaluate_checkpoint(cfg: &RunConfig, path: &Path, source: MaskSource) -> Result<Evaluation> {
    let (model, store) = load_model(cfg, path)?;
    evaluate(&model, &store, cfg, &Dataset::new(cfg, Split::Eval), source, source.name())
}

/// Values of the sparsity weight swept by default.
pub const LAMBDA_GRID: [f64; 5] = [1e-8, 1e-7, 5e-7, 1e-6, 5e-6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub sparsity: f64,
    pub l2_3s: f64,
    pub collision_pct: f64,
    pub lane_violation_pct: f64,
}

/// One joint run with a learned mask per `(lambda, seed)`, evaluated on
/// the held-out split. Run directories nest under `base.run_dir`.
pub fn sweep_sparsity(base: &RunConfig, lambdas: &[f64], seeds: &[u64], write: bool) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.stage = Stage::Joint;
            cfg.mask = MaskSource::Learned;
            cfg.loss.attn = lambda;
            cfg.seed = seed;
            cfg.run_dir = base.run_dir.join(format!("lambda{lambda:e}_seed{seed}"));
            let t = train(&cfg, write)?;
            let ev = evaluate(&t.model, &t.store, &cfg, &Dataset::new(&cfg, Split::Eval), MaskSource::Learned, "learned")?;
            rows.push(SweepRow {
                lambda,
                seed,
                sparsity: ev.report.sparsity,
                l2_3s: ev.report.planning_l2_at_3s,
                collision_pct: ev.report.collision_rate_over_3s,
                lane_violation_pct: ev.report.lane_violation_over_3s,
            });
        }
    }
    if write {
        std::fs::create_dir_all(&base.run_dir).map_err(|e| Error::io(&base.run_dir, e))?;
        let path = base.run_dir.join("sweep.csv");
        let mut wr = csv::Writer::from_path(&path)?;
        for r in &rows {
            wr.serialize(r)?;
        }
        wr.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

/// Binary mask image and RGB composite of one scene.
pub struct Raster {
    /// P5 image of the mask at feature resolution.
    pub mask_pgm: Vec<u8>,
    /// P6 image at input resolution.
    pub composite_ppm: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    /// `rows * cols` RGB triples.
    pub pixels: Vec<[u8; 3]>,
}

pub const MAP_GRAY: [u8; 3] = [96, 96, 96];
pub const ACTOR_GREEN: [u8; 3] = [0, 200, 0];
pub const EGO_BLUE: [u8; 3] = [0, 0, 255];
pub const PATH_CYAN: [u8; 3] = [0, 255, 255];

impl Raster {
    /// Pixels whose red channel is saturated, which only the attention
    /// overlay sets.
    pub fn red_pixels(&self) -> usize {
        self.pixels.iter().filter(|p| p[0] == 255).count()
    }

    pub fn green_pixels(&self) -> usize {
        self.pixels.iter().filter(|p| p[1] == ACTOR_GREEN[1]).count()
    }
}

/// Map in gray, actors in green, ego in blue, the plan as a cyan polyline,
/// then a red overlay on every input cell under an active mask cell.
pub fn render(scene: &Scene, mask: &AttentionMask, plan: &[Pose]) -> Result<Raster> {
    let grid = &scene.grid;
    let (rows, cols) = grid.dims()?;
    if (mask.rows() * FEATURE_STRIDE, mask.cols() * FEATURE_STRIDE) != (rows, cols) {
        return Err(Error::shape("render", format!("mask {}x{} vs grid {rows}x{cols}", mask.rows(), mask.cols())));
    }
    let surface = lane_surface(scene)?;
    let mut px = vec![[0u8; 3]; rows * cols];
    for (k, on) in surface.iter().enumerate() {
        if *on {
            px[k] = MAP_GRAY;
        }
    }
    let boxes: Vec<_> = scene.actors.iter().map(|a| a.bbox()).collect();
    let ego = ego_box(Pose::new(0.0, 0.0, 0.0));
    for i in 0..rows {
        for j in 0..cols {
            let c = grid.cell_center(i, j);
            if boxes.iter().any(|b| b.contains(c)) {
                px[i * cols + j] = ACTOR_GREEN;
            }
            if ego.contains(c) {
                px[i * cols + j] = EGO_BLUE;
            }
        }
    }
    let mut prev = [0.0, 0.0];
    for p in plan {
        let steps = ((p.x - prev[0]).hypot(p.y - prev[1]) / (grid.resolution * 0.25)).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let u = s as f64 / steps as f64;
            let q = [prev[0] + u * (p.x - prev[0]), prev[1] + u * (p.y - prev[1])];
            if let Some((i, j)) = grid.cell_of(q) {
                px[i * cols + j] = PATH_CYAN;
            }
        }
        prev = [p.x, p.y];
    }
    for i in 0..rows {
        for j in 0..cols {
            if mask.is_active(i / FEATURE_STRIDE, j / FEATURE_STRIDE) {
                px[i * cols + j][0] = 255;
            }
        }
    }
    let mut ppm = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    ppm.extend(px.iter().flatten());
    Ok(Raster { mask_pgm: mask.to_pgm(), composite_ppm: ppm, rows, cols, pixels: px })
}

/// Inference plus [`render`].
pub fn visualize(model: &Model, store: &ParamStore<f32>, cfg: &RunConfig, scene: &Scene, source: MaskSource) -> Result<Raster> {
    let inf = infer(model, store, cfg, scene, source)?;
    render(scene, &inf.mask, &inf.plan)
}
