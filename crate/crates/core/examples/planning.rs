//! Sample clothoid and straight-line trajectories and pick the cheapest
//! under a hand-made cost volume that penalizes leaving the ego lane.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sadrive::nn::Tensor;
use sadrive::planner::{plan, EgoState, PlannerConfig};
use sadrive::scene::{generate_scene, Difficulty, FUTURE_STEPS};

fn main() -> sadrive::Result<()> {
    let scene = generate_scene(11, Difficulty::Sparse);
    let grid = scene.grid;
    let (h, w) = grid.dims()?;
    let mut cost = Tensor::<f64>::zeros(&[1, FUTURE_STEPS, h, w]);
    for t in 0..FUTURE_STEPS {
        for i in 0..h {
            for j in 0..w {
                let c = if scene.drivable(grid.cell_center(i, j)) { 0.0 } else { 5.0 };
                cost.set4(0, t, i, j, c);
            }
        }
    }
    let cfg = PlannerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let result = plan(EgoState::from_scene(&scene), &cost, &grid, &cfg, &mut rng)?;
    println!("picked trajectory {} of {} with cost {:.3}", result.index, result.costs.len(), result.cost);
    for (p, gt) in result.trajectory.waypoints.iter().zip(scene.ego_future()) {
        println!("  ({:6.2}, {:6.2})   logged ({:6.2}, {:6.2})", p.x, p.y, gt.x, gt.y);
    }
    Ok(())
}
