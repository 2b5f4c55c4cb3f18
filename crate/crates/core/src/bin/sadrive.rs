//! Command-line front end: data generation, training, evaluation, sweeps,
//! rasters and FLOP tables. Flags override values from `--config`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sadrive::attention::MaskSource;
use sadrive::backbone::BackboneConfig;
use sadrive::eval::{metrics_table, save_metrics_csv};
use sadrive::scene::save_scene;
use sadrive::train::{
    infer, init_model, load_model, sweep_sparsity, train, visualize, Dataset, RunConfig, Split, Stage, LAMBDA_GRID,
};
use sadrive::{Error, Result};

#[derive(Parser)]
#[command(name = "sadrive", version, about = "Sparse-attention motion planner on synthetic BEV scenes")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Write scene files for one split.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "train")]
        split: String,
        /// Output directory; defaults to `<run_dir>/scenes`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage and write checkpoints and losses.csv.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint on the held-out split; writes metrics.csv.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Extra mask sources evaluated with the same weights.
        #[arg(long = "also", value_delimiter = ',')]
        also: Vec<MaskSource>,
    },
    /// Joint runs over the sparsity weight grid; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Mask PGM and composite PPM for one held-out scene.
    Viz {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
    /// Per-layer dense and sparse FLOPs for one held-out scene; writes flops.csv.
    Flops {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML run config; any flag below overrides it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stage: Option<Stage>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    eval_scenes: Option<usize>,
    #[arg(long)]
    grid_cells: Option<usize>,
    #[arg(long)]
    epochs: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    mask: Option<MaskSource>,
    /// Sparsity weight on the mask.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    plan_weight: Option<f64>,
    /// `default` or `tiny`.
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident => $dst:expr),* $(,)?) => {$(
                if let Some(v) = self.$f.clone() {
                    $dst = v;
                }
            )*};
        }
        set!(
            seed => c.seed,
            stage => c.stage,
            train_scenes => c.train_scenes,
            eval_scenes => c.eval_scenes,
            grid_cells => c.grid_cells,
            epochs => c.epochs,
            lr => c.lr,
            batch_size => c.batch_size,
            mask => c.mask,
            lambda => c.loss.attn,
            gamma1 => c.loss.gamma1,
            plan_weight => c.loss.plan,
            run_dir => c.run_dir,
        );
        if self.max_steps.is_some() {
            c.max_steps = self.max_steps;
        }
        if self.pretrained.is_some() {
            c.pretrained = self.pretrained.clone();
        }
        if let Some(b) = &self.backbone {
            c.backbone = match b.as_str() {
                "default" => BackboneConfig::default(),
                "tiny" => BackboneConfig::tiny(),
                other => return Err(Error::Config(format!("unknown backbone preset {other:?}"))),
            };
        }
        c.validate()?;
        Ok(c)
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn model_for(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(sadrive::backbone::Model, sadrive::nn::ParamStore<f32>)> {
    match checkpoint {
        Some(p) => load_model(cfg, p),
        None => init_model(cfg),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.verb {
        Verb::GenData { run, split, out } => {
            let cfg = run.resolve()?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "eval" => Split::Eval,
                s => return Err(Error::Config(format!("unknown split {s:?}"))),
            };
            let data = Dataset::new(&cfg, split);
            let dir = out.unwrap_or_else(|| cfg.run_dir.join("scenes"));
            mkdir(&dir)?;
            let index = dir.join("index.csv");
            let mut wr = csv::Writer::from_path(&index)?;
            wr.write_record(["index", "seed", "difficulty", "actors", "file"])?;
            for i in 0..data.len {
                let scene = data.scene(i);
                let name = format!("scene{i:05}.txt");
                save_scene(&dir.join(&name), &scene)?;
                wr.write_record([
                    i.to_string(),
                    scene.seed.to_string(),
                    scene.difficulty.name().to_string(),
                    scene.actors.len().to_string(),
                    name,
                ])?;
            }
            wr.flush().map_err(|e| Error::Io { path: index.clone(), source: e })?;
            println!("wrote {} scenes to {}", data.len, dir.display());
        }
        Verb::Train { run } => {
            let cfg = run.resolve()?;
            let t = train(&cfg, true)?;
            if let Some(r) = t.records.last() {
                println!("step {} total {:.4} plan {:.4} cls {:.4} reg {:.4} sparsity {:.3}", r.step, r.total, r.l_plan, r.l_cls, r.l_reg, r.sparsity);
            }
            if let Some(c) = t.checkpoint {
                println!("checkpoint {}", c.display());
            }
        }
        Verb::Eval { run, checkpoint, also } => {
            let cfg = run.resolve()?;
            let (model, store) = load_model(&cfg, &checkpoint)?;
            let data = Dataset::new(&cfg, Split::Eval);
            let mut reports = Vec::new();
            let mut sources = vec![cfg.mask];
            sources.extend(also.into_iter().filter(|s| *s != cfg.mask));
            for s in sources {
                let ev = sadrive::train::evaluate(&model, &store, &cfg, &data, s, s.name())?;
                println!("{}: actor coverage {:.3}", s.name(), ev.coverage);
                reports.push(ev.report);
            }
            mkdir(&cfg.run_dir)?;
            save_metrics_csv(&cfg.run_dir.join("metrics.csv"), &reports)?;
            print!("{}", metrics_table(&reports));
        }
        Verb::Sweep { run, lambdas, seeds } => {
            let cfg = run.resolve()?;
            let lambdas = lambdas.unwrap_or_else(|| LAMBDA_GRID.to_vec());
            let rows = sweep_sparsity(&cfg, &lambdas, &seeds, true)?;
            println!("{:>10} {:>5} {:>9} {:>7} {:>10} {:>9}", "lambda", "seed", "sparsity", "l2_3s", "collision", "lane");
            for r in rows {
                println!(
                    "{:>10.1e} {:>5} {:>9.3} {:>7.3} {:>10.2} {:>9.2}",
                    r.lambda, r.seed, r.sparsity, r.l2_3s, r.collision_pct, r.lane_violation_pct
                );
            }
        }
        Verb::Viz { run, checkpoint, scene } => {
            let cfg = run.resolve()?;
            let (model, store) = model_for(&cfg, checkpoint.as_deref())?;
            let s = Dataset::new(&cfg, Split::Eval).scene(scene);
            let r = visualize(&model, &store, &cfg, &s, cfg.mask)?;
            mkdir(&cfg.run_dir)?;
            write(&cfg.run_dir.join(format!("mask{scene}.pgm")), &r.mask_pgm)?;
            write(&cfg.run_dir.join(format!("scene{scene}.ppm")), &r.composite_ppm)?;
            println!("{} red pixels of {}", r.red_pixels(), r.rows * r.cols);
        }
        Verb::Flops { run, checkpoint, scene } => {
            let cfg = run.resolve()?;
            let (model, store) = model_for(&cfg, checkpoint.as_deref())?;
            let s = Dataset::new(&cfg, Split::Eval).scene(scene);
            let mask = infer(&model, &store, &cfg, &s, cfg.mask)?.mask;
            let n = cfg.grid_cells;
            let gated = if cfg.mask == MaskSource::Dense { None } else { Some(&mask) };
            let report = model.flops(n, n, gated)?;
            mkdir(&cfg.run_dir)?;
            let path = cfg.run_dir.join("flops.csv");
            let file = std::fs::File::create(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            report.write_csv(file)?;
            println!(
                "mask {} sparsity {:.3}: {} of {} multiply-adds ({:.1}%)",
                cfg.mask.name(),
                mask.sparsity(),
                report.sparse_flops,
                report.dense_flops,
                100.0 * report.ratio()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidArgument(_) => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            })
        }
    }
}
