//! Sweep the sparsity weight over a few values from one shared dense
//! checkpoint and print achieved sparsity with the planning metrics.

use sadrive::backbone::BackboneConfig;
use sadrive::train::{sweep_sparsity, train, RunConfig};

fn main() -> sadrive::Result<()> {
    let root = std::env::temp_dir().join("sadrive-sweep");
    let mut base = RunConfig {
        train_scenes: 32,
        eval_scenes: 8,
        grid_cells: 32,
        epochs: 1.0,
        lr: 1e-3,
        negatives: 8,
        backbone: BackboneConfig::tiny(),
        run_dir: root.join("dense"),
        ..RunConfig::default()
    };
    base.loss.attn_scale = 1e6;
    let pre = train(&base, true)?;
    let base = RunConfig { pretrained: pre.checkpoint, lr: 1e-4, run_dir: root.join("sweep"), ..base };
    let rows = sweep_sparsity(&base, &[0.0, 1e-7, 1e-6, 5e-6], &[0], true)?;
    for r in rows {
        println!("lambda {:8.1e}: sparsity {:.3}, L2@3s {:.2} m, collisions {:.1}%", r.lambda, r.sparsity, r.l2_3s, r.collision_pct);
    }
    println!("sweep.csv in {}", base.run_dir.display());
    Ok(())
}
