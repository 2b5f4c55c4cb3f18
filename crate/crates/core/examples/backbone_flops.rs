//! Full backbone forward under a proximity mask, with the per-layer FLOP
//! table written as CSV to stdout.

use sadrive::attention::{baseline_mask, MaskSource};
use sadrive::backbone::{BackboneConfig, Exec, Gate, Model};
use sadrive::nn::{Graph, ParamStore};
use sadrive::scene::{generate_scene_in, rasterize, Difficulty, Grid};

fn main() -> sadrive::Result<()> {
    let cfg = BackboneConfig::tiny();
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&cfg, &mut store, 0)?;
    let scene = generate_scene_in(5, Difficulty::Urban, Grid::square(64));
    let x = rasterize(&scene)?.batch();
    let mask = baseline_mask(MaskSource::Proximity, &scene)?;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let xv = g.constant(x);
    let out = model.forward(&mut g, &p, xv, Gate::Fixed(&mask), Exec::Sparse)?;
    println!("cost volume {:?}, detection scores {:?}", g.value(out.cost).shape(), g.value(out.scores).shape());
    let report = model.flops(64, 64, Some(&mask))?;
    report.write_csv(std::io::stdout())?;
    println!("sparsity {:.3}: whole model at {:.1}% of dense, gated layers at {:.1}%", mask.sparsity(), 100.0 * report.ratio(), 100.0 * report.gated_ratio());
    Ok(())
}
