use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{grad_check, normal_tensor};

const SCALES: [usize; 3] = [1, 2, 4];

fn small_block<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, c: usize) -> CrossScaleBlock {
    CrossScaleBlock::new(store, rng, "blk", c, &SCALES, &[4, 5, 6], Padding::Zero)
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> AttentionMask {
    let data = (0..h * w).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
    AttentionMask::from_hard(Tensor::from_vec(&[1, 1, h, w], data).unwrap()).unwrap()
}

fn run<T: Real>(
    blk: &CrossScaleBlock,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    mask: &AttentionMask,
    sparse: bool,
) -> Tensor<T> {
    let idx = mask_to_blocks(mask, 4, blk.halo()).unwrap();
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let a = g.constant(mask.hard.cast());
    let y = if sparse {
        blk.forward_sparse(&mut g, &p, xv, a, &idx).unwrap()
    } else {
        blk.forward_gated(&mut g, &p, xv, a, &idx).unwrap()
    };
    g.value(y).clone()
}

#[test]
fn blocks_follow_any_active_cell() {
    let mut hard = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
    hard.set4(0, 0, 0, 0, 1.0);
    hard.set4(0, 0, 7, 4, 1.0);
    let m = AttentionMask::from_hard(hard).unwrap();
    let idx = mask_to_blocks(&m, 4, 0).unwrap();
    assert_eq!(idx.active, vec![(0, 0), (1, 1)]);
    assert_eq!(idx.active_fraction(), 0.5);
    let bm = idx.block_mask::<f32>();
    assert_eq!(bm.sum(), 32.0);
    assert!(mask_to_blocks(&m, 3, 0).is_err());
}

#[test]
fn sparse_matches_gated_dense_on_random_triples() {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let blk = small_block(&mut store, &mut rng, 3);
        let x = normal_tensor(&mut rng, &[1, 3, 16, 16], 1.0);
        let p = [0.0, 0.02, 0.1, 0.5, 1.0][seed as usize % 5];
        let mask = random_mask(&mut rng, 16, 16, p);
        let dense = run(&blk, &store, &x, &mask, false);
        let sparse = run(&blk, &store, &x, &mask, true);
        worst = worst.max(dense.max_abs_diff(&sparse));
    }
    assert!(worst <= 1e-5, "max deviation {worst}");
}

#[test]
fn sparse_f32_matches_gated_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f32>::new();
    let blk = small_block(&mut store, &mut rng, 4);
    let x = normal_tensor(&mut rng, &[1, 4, 24, 24], 1.0);
    let mask = random_mask(&mut rng, 24, 24, 0.05);
    let d = run(&blk, &store, &x, &mask, false);
    let s = run(&blk, &store, &x, &mask, true);
    assert!(d.max_abs_diff(&s) <= 1e-5);
}

#[test]
fn empty_mask_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let blk = small_block(&mut store, &mut rng, 3);
    let x = normal_tensor(&mut rng, &[1, 3, 8, 8], 1.0);
    let mask = random_mask(&mut rng, 8, 8, 0.0);
    assert_eq!(run(&blk, &store, &x, &mask, true), x);
    assert_eq!(run(&blk, &store, &x, &mask, false), x);
}

#[test]
fn full_mask_equals_ungated_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let blk = small_block(&mut store, &mut rng, 3);
    let x = normal_tensor(&mut rng, &[1, 3, 8, 8], 1.0);
    let mask = AttentionMask::dense(8, 8);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let y = blk.forward(&mut g, &p, xv).unwrap();
    let full = g.value(y).clone();
    assert!(full.max_abs_diff(&run(&blk, &store, &x, &mask, true)) < 1e-12);
}

#[test]
fn inactive_blocks_pass_through_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let blk = small_block(&mut store, &mut rng, 3);
    let x = normal_tensor(&mut rng, &[1, 3, 16, 16], 1.0);
    let mask = random_mask(&mut rng, 16, 16, 0.05);
    let idx = mask_to_blocks(&mask, 4, blk.halo()).unwrap();
    let y = run(&blk, &store, &x, &mask, true);
    let bm = idx.block_mask::<f64>();
    for c in 0..3 {
        for i in 0..16 {
            for j in 0..16 {
                if bm.at4(0, 0, i, j) == 0.0 {
                    assert_eq!(y.at4(0, c, i, j), x.at4(0, c, i, j));
                }
            }
        }
    }
}

#[test]
fn sparse_rejects_circular_padding_and_misaligned_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let blk = CrossScaleBlock::new(&mut store, &mut rng, "c", 2, &SCALES, &[3, 3, 3], Padding::Circular);
    let mask = AttentionMask::dense(8, 8);
    let idx = mask_to_blocks(&mask, 4, blk.halo()).unwrap();
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
    let a = g.constant(mask.hard.cast());
    assert!(blk.forward_sparse(&mut g, &p, x, a, &idx).is_err());

    let blk = CrossScaleBlock::new(&mut store, &mut rng, "d", 2, &SCALES, &[3, 3, 3], Padding::Zero);
    let idx = mask_to_blocks(&mask, 2, blk.halo()).unwrap();
    assert!(blk.forward_sparse(&mut g, &p, x, a, &idx).is_err());
}

#[test]
fn gradients_through_gather_and_scatter() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::<f64>::new();
        let blk = small_block(&mut store, &mut rng, 2);
        let mask = random_mask(&mut rng, 8, 8, 0.15);
        let idx = mask_to_blocks(&mask, 4, blk.halo()).unwrap();
        let x = normal_tensor(&mut rng, &[1, 2, 8, 8], 1.0);
        let probe = normal_tensor::<f64, _>(&mut rng, &[1, 2, 8, 8], 1.0);
        let report = grad_check(
            |g, xv| {
                let p = store.bind_frozen(g);
                let a = g.constant(mask.hard.cast());
                let y = blk.forward_sparse(g, &p, xv, a, &idx)?;
                let y = g.mul_const(y, probe.clone())?;
                Ok(g.sum(y))
            },
            &x,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {}", report.max_rel_error);
    }
}

#[test]
fn sparse_and_gated_share_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let blk = small_block(&mut store, &mut rng, 3);
    let x = normal_tensor(&mut rng, &[1, 3, 16, 16], 1.0);
    let mask = random_mask(&mut rng, 16, 16, 0.05);
    let idx = mask_to_blocks(&mask, 4, blk.halo()).unwrap();
    let grads = |sparse: bool| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let a = g.constant(mask.hard.cast());
        let y = if sparse {
            blk.forward_sparse(&mut g, &p, xv, a, &idx).unwrap()
        } else {
            blk.forward_gated(&mut g, &p, xv, a, &idx).unwrap()
        };
        let l = g.sum_sq(y);
        store.collect_grads(&p, &g.backward(l).unwrap())
    };
    for (d, s) in grads(false).iter().zip(grads(true)) {
        assert!(d.max_abs_diff(&s) < 1e-9);
    }
}

/// Counts the output cells each layer must produce by tracing dependencies
/// backwards from the active block cells, one tap at a time.
fn traced_cells(idx: &BlockIndex, scale: usize) -> [usize; 3] {
    let (h, w) = (idx.rows, idx.cols);
    let (hs, ws) = (h / scale, w / scale);
    let bm = idx.block_mask::<f64>();
    // Upsample: full-res output cell (i, j) reads branch cell (i/s, j/s).
    let mut proj = vec![false; hs * ws];
    for i in 0..h {
        for j in 0..w {
            if bm.at4(0, 0, i, j) > 0.0 {
                proj[(i / scale) * ws + j / scale] = true;
            }
        }
    }
    // 1x1 projection reads the same cell of conv2.
    let conv2 = proj.clone();
    // 3x3 conv2 reads its 3x3 neighbourhood of conv1 outputs inside the grid.
    let mut conv1 = vec![false; hs * ws];
    for i in 0..hs {
        for j in 0..ws {
            if !conv2[i * ws + j] {
                continue;
            }
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let (u, v) = (i as isize + di, j as isize + dj);
                    if u >= 0 && v >= 0 && (u as usize) < hs && (v as usize) < ws {
                        conv1[u as usize * ws + v as usize] = true;
                    }
                }
            }
        }
    }
    let n = |m: &[bool]| m.iter().filter(|&&b| b).count();
    [n(&conv1), n(&conv2), n(&proj)]
}

#[test]
fn flop_counts_match_dependency_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f32>::new();
    let blk = CrossScaleBlock::new(&mut store, &mut rng, "b", 16, &SCALES, &[8, 12, 16], Padding::Zero);
    for trial in 0..30 {
        let mask = random_mask(&mut rng, 24, 24, [0.01, 0.03, 0.2][trial % 3]);
        let idx = mask_to_blocks(&mask, 4, blk.halo()).unwrap();
        let layers = blk.flops("b", 24, 24, Some(&idx));
        for (bi, br) in blk.branches.iter().enumerate() {
            let cells = traced_cells(&idx, br.scale);
            let costs = [9 * 16 * br.width, 9 * br.width * br.width, br.width * 16];
            for l in 0..3 {
                let layer = &layers[bi * 3 + l];
                assert_eq!(layer.sparse, 2 * (costs[l] * cells[l]) as u64, "{}", layer.name);
                let dense_cells = (24 / br.scale) * (24 / br.scale);
                assert_eq!(layer.dense, 2 * (costs[l] * dense_cells) as u64);
                assert!(layer.sparse <= layer.gathered || idx.active.is_empty());
            }
        }
    }
}

#[test]
fn dense_flops_match_layer_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f32>::new();
    let blk = CrossScaleBlock::new(&mut store, &mut rng, "b", 128, &SCALES, &[64, 96, 128], Padding::Zero);
    let layers = blk.flops("b", 24, 24, None);
    let total: u64 = layers.iter().map(|l| l.dense).sum();
    // Hand count: sum over branches of 2 * cells * (9*128*w + 9*w*w + w*128).
    let hand: u64 = [(1usize, 64usize), (2, 96), (4, 128)]
        .iter()
        .map(|&(s, w)| 2 * ((24 / s) * (24 / s) * (9 * 128 * w + 9 * w * w + w * 128)) as u64)
        .sum();
    assert_eq!(total, hand);
    assert_eq!(hand, 218_529_792);
}

#[test]
fn flop_report_csv_has_total_row() {
    let r = FlopReport::new(
        vec![LayerFlops::ungated("stem", 100), LayerFlops { gated: true, ..LayerFlops::ungated("g", 50) }],
        0.9,
    );
    assert_eq!(r.dense_flops, 150);
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("layer,dense,sparse,active_blocks,gathered\n"));
    assert!(text.trim_end().ends_with("total,150,150,,150"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sparse_flops_monotone_in_active_blocks(seed in 0u64..1000, extra in 0usize..36) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f32>::new();
        let blk = CrossScaleBlock::new(&mut store, &mut rng, "b", 4, &SCALES, &[2, 2, 2], Padding::Zero);
        let mask = random_mask(&mut rng, 24, 24, 0.01);
        let idx = mask_to_blocks(&mask, 4, blk.halo()).unwrap();
        let mut more = idx.clone();
        let extra_block = (extra / 6, extra % 6);
        if !more.active.contains(&extra_block) {
            more.active.push(extra_block);
            more.active.sort();
        }
        let a: u64 = blk.flops("b", 24, 24, Some(&idx)).iter().map(|l| l.sparse).sum();
        let b: u64 = blk.flops("b", 24, 24, Some(&more)).iter().map(|l| l.sparse).sum();
        let d: u64 = blk.flops("b", 24, 24, None).iter().map(|l| l.dense).sum();
        prop_assert!(a <= b && b <= d);
    }
}
