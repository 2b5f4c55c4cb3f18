//! Block-sparse execution of one cross-scale residual block: gather active
//! tiles with their halo, convolve, scatter back. Compares against the
//! masked dense computation and reports FLOPs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadrive::attention::AttentionMask;
use sadrive::nn::{normal_tensor, Graph, Padding, ParamStore, Tensor};
use sadrive::sparse::{mask_to_blocks, CrossScaleBlock};

fn main() -> sadrive::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let blk = CrossScaleBlock::new(&mut store, &mut rng, "blk", 8, &[1, 2, 4], &[8, 8, 8], Padding::Zero);
    let x = normal_tensor::<f64, _>(&mut rng, &[1, 8, 32, 32], 1.0);
    for p in [0.02, 0.05, 0.2] {
        let data = (0..32 * 32).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
        let mask = AttentionMask::from_hard(Tensor::from_vec(&[1, 1, 32, 32], data)?)?;
        let idx = mask_to_blocks(&mask, 4, blk.halo())?;
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let a = g.constant(mask.hard.cast());
        let dense = blk.forward_gated(&mut g, &bound, xv, a, &idx)?;
        let sparse = blk.forward_sparse(&mut g, &bound, xv, a, &idx)?;
        let err = g.value(dense).max_abs_diff(g.value(sparse));
        let fl = blk.flops("blk", 32, 32, Some(&idx));
        let (d, s): (u64, u64) = fl.iter().fold((0, 0), |(d, s), l| (d + l.dense, s + l.sparse));
        println!(
            "mask sparsity {:.3}: {} active blocks, max |sparse - dense| {err:.1e}, FLOPs {:.1}% of dense",
            mask.sparsity(),
            idx.active.len(),
            100.0 * s as f64 / d as f64
        );
    }
    Ok(())
}
