use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::gumbel_tensor;
use crate::nn::{decode_checkpoint, encode_checkpoint, grad_check, normal_tensor};

fn input<T: Real>(seed: u64, c: usize, side: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Sparse binary occupancy, like a rasterized sweep.
    let data = (0..c * side * side).map(|_| if rng.gen_bool(0.1) { T::one() } else { T::zero() }).collect();
    Tensor::from_vec(&[1, c, side, side], data).unwrap()
}

fn run<T: Real>(model: &Model, store: &ParamStore<T>, x: &Tensor<T>, gate: Gate<'_, T>, exec: Exec) -> [Tensor<T>; 4] {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let o = model.forward(&mut g, &p, xv, gate, exec).unwrap();
    [o.features, o.scores, o.regression, o.cost].map(|v| g.value(v).clone())
}

fn shift<T: Real>(t: &Tensor<T>, di: usize, dj: usize) -> Tensor<T> {
    let [n, c, h, w] = t.dims4();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out.set4(b, ch, (i + di) % h, (j + dj) % w, t.at4(b, ch, i, j));
                }
            }
        }
    }
    out
}

#[test]
fn default_shapes() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&cfg, &mut store, 0).unwrap();
    let x = input::<f32>(0, INPUT_CHANNELS, 96);
    let [f, s, r, c] = run(&model, &store, &x, Gate::None, Exec::Dense);
    assert_eq!(f.shape(), &[1, 128, 24, 24]);
    assert_eq!(s.shape(), &[1, 1, 24, 24]);
    assert_eq!(r.shape(), &[1, 42, 24, 24]);
    assert_eq!(c.shape(), &[1, 6, 96, 96]);
    assert!(c.all_finite());
}

#[test]
fn dense_mask_matches_ungated() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&cfg, &mut store, 1).unwrap();
    let x = input::<f32>(1, INPUT_CHANNELS, 96);
    let dense = AttentionMask::dense(24, 24);
    let plain = run(&model, &store, &x, Gate::None, Exec::Dense);
    for exec in [Exec::Dense, Exec::Sparse] {
        let gated = run(&model, &store, &x, Gate::Fixed(&dense), exec);
        for (a, b) in plain.iter().zip(&gated) {
            assert!(a.max_abs_diff(b) <= 1e-6, "{exec:?}: {}", a.max_abs_diff(b));
        }
    }
}

#[test]
fn zero_features_give_neutral_detection() {
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&BackboneConfig::tiny(), &mut store, 2).unwrap();
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let f = g.constant(Tensor::zeros(&[1, 16, 4, 4]));
    let (s, r) = model.detection_header(&mut g, &p, f).unwrap();
    assert!(g.value(s).data().iter().all(|&v| v == 0.5));
    assert!(g.value(r).data().iter().all(|&v| v == 0.0));
}

#[test]
fn scores_strictly_inside_unit_interval() {
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&BackboneConfig::tiny(), &mut store, 3).unwrap();
    // Give the zero-initialised head something to say.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let id = store.id("det.cls.1.weight").unwrap();
    *store.get_mut(id) = normal_tensor(&mut rng, &[1, 16, 1, 1], 2.0);
    let x = input::<f32>(3, INPUT_CHANNELS, 32);
    let [_, s, _, _] = run(&model, &store, &x, Gate::None, Exec::Dense);
    assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn rejects_wrong_channels_and_sizes() {
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&BackboneConfig::tiny(), &mut store, 4).unwrap();
    for (c, side) in [(INPUT_CHANNELS - 1, 32), (INPUT_CHANNELS, 24)] {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(Tensor::zeros(&[1, c, side, side]));
        assert!(model.forward(&mut g, &p, x, Gate::None, Exec::Dense).is_err());
    }
}

fn randomize_heads(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for name in ["det.cls.1.weight", "det.reg.1.weight"] {
        let id = store.id(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = normal_tensor(rng, &shape, 0.5);
    }
}

#[test]
fn detection_header_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(&BackboneConfig::tiny(), &mut store, seed).unwrap();
        randomize_heads(&mut store, &mut rng);
        let f = normal_tensor(&mut rng, &[1, 16, 4, 4], 1.0);
        let ps = normal_tensor::<f64, _>(&mut rng, &[1, 1, 4, 4], 1.0);
        let pr = normal_tensor::<f64, _>(&mut rng, &[1, 42, 4, 4], 1.0);
        let report = grad_check(
            |g, fv| {
                let p = store.bind_frozen(g);
                let (s, r) = model.detection_header(g, &p, fv)?;
                let s = g.mul_const(s, ps.clone())?;
                let r = g.mul_const(r, pr.clone())?;
                let (s, r) = (g.sum(s), g.sum(r));
                g.add(s, r)
            },
            &f,
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {}", report.max_rel_error);
    }
}

#[test]
fn planning_header_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(&BackboneConfig::tiny(), &mut store, seed).unwrap();
        let f = normal_tensor(&mut rng, &[1, 16, 3, 3], 1.0);
        let probe = normal_tensor::<f64, _>(&mut rng, &[1, 6, 12, 12], 1.0);
        let report = grad_check(
            |g, fv| {
                let p = store.bind_frozen(g);
                let c = model.planning_header(g, &p, fv)?;
                let c = g.mul_const(c, probe.clone())?;
                Ok(g.sum(c))
            },
            &f,
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {}", report.max_rel_error);
    }
}

#[test]
fn planning_header_shift_equivariant_with_circular_padding() {
    let cfg = BackboneConfig { circular_padding: true, ..BackboneConfig::tiny() };
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&cfg, &mut store, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = normal_tensor::<f64, _>(&mut rng, &[1, 16, 6, 6], 1.0);
    let cost = |f: &Tensor<f64>| {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let fv = g.constant(f.clone());
        let c = model.planning_header(&mut g, &p, fv).unwrap();
        g.value(c).clone()
    };
    // One feature cell is four cost cells.
    let shifted = cost(&shift(&f, 1, 0));
    assert!(shifted.max_abs_diff(&shift(&cost(&f), 4, 0)) < 1e-12);
    let shifted = cost(&shift(&f, 2, 5));
    assert!(shifted.max_abs_diff(&shift(&cost(&f), 8, 20)) < 1e-12);
}

#[test]
fn whole_model_shift_equivariant_with_circular_padding() {
    let cfg = BackboneConfig { circular_padding: true, ..BackboneConfig::tiny() };
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&cfg, &mut store, 6).unwrap();
    let x = input::<f64>(6, INPUT_CHANNELS, 32);
    // The coarsest branch pools 4 feature cells, so shifts come in 16 cells.
    let [_, _, _, c] = run(&model, &store, &x, Gate::None, Exec::Dense);
    let [_, _, _, cs] = run(&model, &store, &shift(&x, 16, 0), Gate::None, Exec::Dense);
    assert!(cs.max_abs_diff(&shift(&c, 16, 0)) < 1e-10);
}

#[test]
fn sparse_and_dense_execution_agree_on_all_gradients() {
    let mut store = ParamStore::<f64>::new();
    let cfg = BackboneConfig::tiny();
    let model = Model::new(&cfg, &mut store, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Make the scorer produce a mixed mask.
    let id = store.id("attn.z.weight").unwrap();
    *store.get_mut(id) = normal_tensor(&mut rng, &[1, 8, 1, 1], 1.0);
    let x = input::<f64>(7, INPUT_CHANNELS, 64);
    let g0 = gumbel_tensor::<f64, _>(&mut rng, &[1, 1, 16, 16]);
    let g1 = gumbel_tensor::<f64, _>(&mut rng, &[1, 1, 16, 16]);
    let grads = |exec: Exec| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let gate = Gate::Learned { noise: Some((&g0, &g1)), temperature: 1.0 };
        let o = model.forward(&mut g, &p, xv, gate, exec).unwrap();
        let m = o.mask.clone().unwrap();
        assert!(m.sparsity() > 0.1 && m.sparsity() < 0.9, "{}", m.sparsity());
        let a = g.sum_sq(o.cost);
        let b = g.sum_sq(o.regression);
        let l = g.add(a, b).unwrap();
        let sp = g.sum(o.mask_var.unwrap());
        let l = g.add(l, sp).unwrap();
        store.collect_grads(&p, &g.backward(l).unwrap())
    };
    let (d, s) = (grads(Exec::Dense), grads(Exec::Sparse));
    let scorer = store.id("attn.e0.weight").unwrap();
    for ((name, _), (a, b)) in store.iter().zip(d.iter().zip(&s)) {
        let scale = a.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(a.max_abs_diff(b) <= 1e-9 * scale, "{name}");
    }
    // Gradient must reach the scorer through the straight-through path.
    let gz = &d[scorer_index(&store, scorer)];
    assert!(gz.data().iter().any(|&v| v != 0.0));
}

fn scorer_index(store: &ParamStore<f64>, id: crate::nn::ParamId) -> usize {
    store.iter().position(|(n, _)| store.id(n) == Some(id)).unwrap()
}

#[test]
fn checkpoint_roundtrip_is_bit_identical() {
    let cfg = BackboneConfig::tiny();
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&cfg, &mut store, 8).unwrap();
    let bytes = encode_checkpoint(&store, &cfg.to_toml());
    let mut restored = ParamStore::<f32>::new();
    let model2 = Model::new(&cfg, &mut restored, 99).unwrap();
    let (loaded, text) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(BackboneConfig::from_toml(&text).unwrap(), cfg);
    restored.load_from(&loaded).unwrap();
    let x = input::<f32>(8, INPUT_CHANNELS, 32);
    let a = run(&model, &store, &x, Gate::None, Exec::Sparse);
    let b = run(&model2, &restored, &x, Gate::None, Exec::Sparse);
    for (u, v) in a.iter().zip(&b) {
        assert_eq!(u.data(), v.data());
    }
}

#[test]
fn config_roundtrip_and_validation() {
    let cfg = BackboneConfig::default();
    assert_eq!(BackboneConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let bad = cfg.to_toml().replace("version = 1", "version = 2");
    assert!(matches!(BackboneConfig::from_toml(&bad), Err(Error::Config(_))));
    let unknown = format!("{}\nextra = 3\n", cfg.to_toml());
    assert!(BackboneConfig::from_toml(&unknown).is_err());
    assert!(BackboneConfig { attention_tap: 4, ..cfg.clone() }.validate().is_err());
    assert!(BackboneConfig { branch_scales: [1, 2, 8], ..cfg }.validate().is_err());
}

#[test]
fn halving_widths_quarters_flops() {
    let cfg = BackboneConfig::default();
    let full = count_flops(&cfg, 96, 96, None).unwrap();
    let half = count_flops(&cfg.scale_width(0.5), 96, 96, None).unwrap();
    let ratio = full.dense_flops as f64 / half.dense_flops as f64;
    // Exactly 4 except for the first stem layer, whose input width is fixed.
    assert!((3.8..=4.0).contains(&ratio), "{ratio}");
    let blocks = |r: &FlopReport| r.layers.iter().filter(|l| l.name.starts_with("block")).map(|l| l.dense).sum::<u64>();
    assert_eq!(blocks(&full), 4 * blocks(&half));
}

#[test]
fn flop_report_totals_and_dense_limit() {
    let cfg = BackboneConfig::default();
    let dense = AttentionMask::dense(24, 24);
    let r = count_flops(&cfg, 96, 96, Some(&dense)).unwrap();
    assert_eq!(r.sparse_flops, r.dense_flops);
    assert_eq!(r.layers.iter().map(|l| l.dense).sum::<u64>(), r.dense_flops);
    // Stem 42.2M, three blocks of 218.5M.
    let stem: u64 = r.layers.iter().take(3).map(|l| l.dense).sum();
    assert_eq!(stem, 2 * (9 * 33 * 16 * 48 * 48 + 9 * 16 * 64 * 24 * 24 + 64 * 128 * 24 * 24));
    let none = count_flops(&cfg, 96, 96, None).unwrap();
    assert_eq!(none.dense_flops + cfg_unet_flops(&r), r.dense_flops);
    assert!(count_flops(&cfg, 96, 96, Some(&AttentionMask::dense(12, 12))).is_err());
}

fn cfg_unet_flops(r: &FlopReport) -> u64 {
    r.layers.iter().filter(|l| l.name.starts_with("unet")).map(|l| l.dense).sum()
}

#[test]
fn single_conv_flop_example() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = Conv2d::new(&mut store, &mut rng, "c", 1, 1, ConvGeom::new(3, 1, 1), false);
    assert_eq!(c.flops(8, 8).unwrap(), 1152);
}
