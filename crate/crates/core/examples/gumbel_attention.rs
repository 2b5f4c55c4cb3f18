//! Gumbel-perturbed binary attention: hard mask, soft relaxation and the
//! straight-through gradient, plus the fixed baseline masks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sadrive::attention::{attend, baseline_mask, gumbel_tensor, MaskSource};
use sadrive::nn::{normal_tensor, Graph};
use sadrive::scene::{generate_scene, Difficulty};

fn main() -> sadrive::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = normal_tensor::<f64, _>(&mut rng, &[1, 1, 8, 8], 2.0);
    for k in [1.0, 0.1, 0.01] {
        let mut g = Graph::<f64>::new();
        let zv = g.param(z.clone());
        let g0 = gumbel_tensor(&mut rng, &[1, 1, 8, 8]);
        let g1 = gumbel_tensor(&mut rng, &[1, 1, 8, 8]);
        let a = attend(&mut g, zv, Some((&g0, &g1)), k)?;
        let loss = g.sum(a.hard);
        let grads = g.backward(loss)?;
        let gap = a.mask.hard.data().iter().zip(a.mask.soft.data()).map(|(h, s)| (h - s).abs()).sum::<f32>() / 64.0;
        println!(
            "K={k:<5} active {:2}/64, mean |soft - hard| {gap:.3}, |dL/dz| {:.3}",
            a.mask.active_count(),
            grads.get_or_zeros(zv).data().iter().map(|v| v.abs()).sum::<f64>()
        );
    }
    let scene = generate_scene(3, Difficulty::Urban);
    for s in [MaskSource::Road, MaskSource::Vehicle, MaskSource::Proximity, MaskSource::Dense] {
        println!("{:>9} mask sparsity {:.3}", s.name(), baseline_mask(s, &scene)?.sparsity());
    }
    Ok(())
}
