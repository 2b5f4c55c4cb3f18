//! Finite-difference check of a small conv -> deconv -> sigmoid graph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sadrive::nn::{grad_check, normal_tensor, ConvGeom, Graph, Var};

fn main() -> sadrive::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w1 = normal_tensor::<f64, _>(&mut rng, &[3, 2, 3, 3], 0.5);
    let w2 = normal_tensor::<f64, _>(&mut rng, &[3, 2, 4, 4], 0.5);
    let x = normal_tensor::<f64, _>(&mut rng, &[1, 2, 6, 6], 1.0);
    let f = |g: &mut Graph<f64>, x: Var| {
        let a = g.constant(w1.clone());
        let b = g.constant(w2.clone());
        let h = g.conv2d(x, a, None, ConvGeom::new(3, 2, 1))?;
        let h = g.sigmoid(h);
        let y = g.deconv2d(h, b, None, ConvGeom::new(4, 2, 1))?;
        Ok(g.sum_sq(y))
    };
    let report = grad_check(f, &x, 1e-5, 1e-3)?;
    println!("max relative error {:.2e} over {} coordinates: {}", report.max_rel_error, x.numel(), if report.passed() { "ok" } else { "FAILED" });
    Ok(())
}
