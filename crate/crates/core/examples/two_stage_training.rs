//! Dense pretraining followed by joint training of backbone and learned
//! attention, then evaluation against fixed masks. Small enough to run in
//! about a minute; pass a directory to keep the artifacts.

use sadrive::attention::MaskSource;
use sadrive::backbone::BackboneConfig;
use sadrive::eval::metrics_table;
use sadrive::train::{evaluate, train, Dataset, RunConfig, Split, Stage};

fn main() -> sadrive::Result<()> {
    let root = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("sadrive-two-stage"), Into::into);
    let mut dense = RunConfig {
        train_scenes: 64,
        eval_scenes: 16,
        grid_cells: 64,
        epochs: 2.0,
        lr: 1e-3,
        negatives: 16,
        backbone: BackboneConfig::tiny(),
        run_dir: root.join("dense"),
        ..RunConfig::default()
    };
    dense.loss.plan = 1.0;
    let pre = train(&dense, true)?;
    let first = &pre.records[0];
    let last = pre.records.last().expect("at least one step");
    println!("dense: total loss {:.2} -> {:.2} over {} steps", first.total, last.total, pre.records.len());

    let joint = RunConfig { stage: Stage::Joint, lr: 1e-4, pretrained: pre.checkpoint, run_dir: root.join("joint"), ..dense.clone() };
    let t = train(&joint, true)?;
    println!("joint: training-mask sparsity {:.3} at the last step", t.records.last().map_or(0.0, |r| r.sparsity));

    let data = Dataset::new(&joint, Split::Eval);
    let mut reports = Vec::new();
    for s in [MaskSource::Learned, MaskSource::Proximity, MaskSource::Dense] {
        reports.push(evaluate(&t.model, &t.store, &joint, &data, s, s.name())?.report);
    }
    print!("{}", metrics_table(&reports));
    println!("artifacts in {}", root.display());
    Ok(())
}
