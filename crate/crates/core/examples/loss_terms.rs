//! The joint objective on one scene, term by term: max-margin planning,
//! attention-reweighted detection losses and the mask sparsity term. Also
//! shows the degenerate case where a mask that avoids every actor removes
//! the detection signal when all weight sits on the attended region.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sadrive::attention::{baseline_mask, MaskSource};
use sadrive::backbone::{BackboneConfig, Exec, Gate, Model};
use sadrive::losses::{cls_loss_map, planning_loss, reweight, task_margins, LossWeights};
use sadrive::nn::{Graph, ParamStore, Tensor};
use sadrive::planner::{sample_trajectories, EgoState, PlannerConfig};
use sadrive::scene::{generate_scene_in, rasterize, rasterize_labels, Difficulty, Grid};

fn main() -> sadrive::Result<()> {
    let scene = generate_scene_in(21, Difficulty::Dense, Grid::square(64));
    let labels = rasterize_labels(&scene)?;
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&BackboneConfig::tiny(), &mut store, 0)?;
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(rasterize(&scene)?.batch());
    let mask = baseline_mask(MaskSource::Proximity, &scene)?;
    let out = model.forward(&mut g, &p, x, Gate::Fixed(&mask), Exec::Sparse)?;

    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let negs: Vec<_> = sample_trajectories(EgoState::from_scene(&scene), 16, &PlannerConfig::default(), &mut rng)
        .into_iter()
        .map(|t| t.waypoints)
        .collect();
    let margins = task_margins(scene.ego_future(), &negs, Some(&scene), w.v_penalty)?;
    let plan = planning_loss(&mut g, out.cost, &scene.grid, scene.ego_future(), &negs, &margins)?;
    let cls_map = cls_loss_map(&mut g, out.scores, &labels)?;
    let a = g.constant(mask.hard.clone());
    let cls = reweight(&mut g, cls_map, Some(a), w.gamma0, w.gamma1)?;
    println!("planning hinge {:.3}, reweighted cls {:.3}, sum(A) {}", g.value(plan).item(), g.value(cls).item(), mask.active_count());

    // All weight on the attended region, with a mask that covers no actor.
    let (h, wd) = (labels.rows, labels.cols);
    let avoid: Vec<f32> = labels.owner.iter().map(|o| if o.is_some() { 0.0 } else { 1.0 }).collect();
    let av = g.constant(Tensor::from_vec(&[1, 1, h, wd], avoid)?);
    let degenerate = reweight(&mut g, cls_map, Some(av), 0.0, 1.0)?;
    let grads = g.backward(degenerate)?;
    let score_grad = grads.get_or_zeros(out.scores);
    let on_actors: f32 = labels.owner.iter().enumerate().filter(|(_, o)| o.is_some()).map(|(k, _)| score_grad.data()[k].abs()).sum();
    println!("gamma1 = 1 with an actor-avoiding mask: gradient on actor cells {on_actors}");
    Ok(())
}
