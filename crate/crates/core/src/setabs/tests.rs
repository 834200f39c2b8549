use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;
use crate::nnops::BN_EPS;
use crate::oracle;

fn cloud(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn feats(rng: &mut impl Rng, n: usize, c: usize) -> Vec<f64> {
    (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn batch(pos: Vec<f64>, c: usize, f: Vec<f64>) -> PointSetBatch {
    let n = pos.len() / 3;
    PointSetBatch::new(1, n, c, pos, f, None).unwrap()
}

fn fill(store: &mut ParamStore, name: &str, value: f64) {
    store.get_mut(name).unwrap().data_mut().fill(value);
}

fn block_params(cfg: &BlockConfig) -> usize {
    let block = VpsaBlock::new("b", cfg.clone()).unwrap();
    let mut store = ParamStore::new();
    block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    store.num_scalars()
}

#[test]
fn sa_single_point_identity_mlp() {
    let mut cfg = BlockConfig::new(2, 5, 1);
    cfg.stride = 1;
    let block = SaBlock::new("sa", cfg, 1).unwrap();
    let mut store = ParamStore::new();
    block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    let w = store.get_mut("sa.mlp0.linear.weight").unwrap();
    w.data_mut().fill(0.0);
    for i in 0..5 {
        w.data_mut()[i * 5 + i] = 1.0;
    }
    let x = batch(vec![0.3, -0.2, 0.9], 2, vec![1.5, -2.0]);
    let y = block.apply(&store, &x, Mode::Eval).unwrap();
    let s = 1.0 / (1.0 + BN_EPS).sqrt();
    let expected = [1.5 * s, 0.0, 0.0, 0.0, 0.0];
    for (a, b) in y.features().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(y.points(), 1);
}

#[test]
fn sa_output_count_is_ceil_of_stride() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cfg = BlockConfig::new(3, 4, 4);
    cfg.stride = 3;
    let block = SaBlock::new("sa", cfg, 1).unwrap();
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng);
    let x = batch(cloud(&mut rng, 10), 3, feats(&mut rng, 10, 3));
    assert_eq!(block.apply(&store, &x, Mode::Eval).unwrap().points(), 4);
}

#[test]
fn sa_is_invariant_to_point_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (n, c) = (16, 3);
        let mut cfg = BlockConfig::new(c, 6, 4);
        cfg.stride = 2;
        let block = SaBlock::new("sa", cfg, 2).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        let x = batch(cloud(&mut rng, n), c, feats(&mut rng, n, c));
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (2..n).rev() {
            perm.swap(i, rng.random_range(1..=i));
        }
        let xp = x.permute_points(&perm).unwrap();
        let a = block.apply(&store, &x, Mode::Eval).unwrap();
        let b = block.apply(&store, &xp, Mode::Eval).unwrap();
        // same centers in the same sampling order
        assert_eq!(a.positions(), b.positions());
        let diff = a.features().iter().zip(b.features()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
    }
}

#[test]
fn sa_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let (n, c, k) = (rng.random_range(4..20), rng.random_range(1..5), rng.random_range(1..6));
        let mut cfg = BlockConfig::new(c, 5, k);
        cfg.stride = rng.random_range(1..4);
        let block = SaBlock::new("sa", cfg.clone(), 1).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        let (pos, f) = (cloud(&mut rng, n), feats(&mut rng, n, c));
        let y = block.apply(&store, &batch(pos.clone(), c, f.clone()), Mode::Train).unwrap();
        let ocfg = oracle::OracleBlock {
            prefix: "sa",
            in_channels: c,
            out_channels: 5,
            k,
            m: 1,
            sum_reduce: false,
            projection_bias: true,
            train: true,
        };
        let (_, expected) = oracle::naive_sa(&store, &ocfg, cfg.stride, &pos, &f).unwrap();
        let diff = y.features().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }
}

#[test]
fn vpsa_dead_main_path_leaves_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, c) = (12, 4);
    let block = VpsaBlock::new("v", BlockConfig::new(c, c, 4)).unwrap();
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng);
    for name in ["v.encoder.zx.weight", "v.encoder.zx.bias", "v.hc.weight", "v.hc.bias", "v.hp.bias"] {
        fill(&mut store, name, 0.0);
    }
    fill(&mut store, "v.eta.bias", 0.1);
    let x = batch(cloud(&mut rng, n), c, feats(&mut rng, n, c));
    let y = block.apply(&store, &x, Mode::Eval).unwrap();
    let w = store.get("v.eta.weight").unwrap();
    for i in 0..n {
        for o in 0..c {
            let lin: f64 = 0.1 + (0..c).map(|a| x.feature(0, i)[a] * w.data()[a * c + o]).sum::<f64>();
            assert!((y.feature(0, i)[o] - lin.max(0.0)).abs() < 1e-14);
        }
    }
}

fn permute_slots(g: &Grouping, rng: &mut impl Rng) -> Grouping {
    let mut nbr = g.nbr.to_vec();
    let mut rel = g.rel_pos.data().to_vec();
    let mut pad: Vec<bool> = g.pad.as_ref().map_or(vec![false; nbr.len()], |p| p.to_vec());
    for grp in 0..nbr.len() / g.k {
        for i in (1..g.k).rev() {
            let j = rng.random_range(0..=i);
            let (a, b) = (grp * g.k + i, grp * g.k + j);
            nbr.swap(a, b);
            pad.swap(a, b);
            for d in 0..3 {
                rel.swap(a * 3 + d, b * 3 + d);
            }
        }
    }
    Grouping {
        nbr: nbr.into(),
        pad: g.pad.as_ref().map(|_| pad.into()),
        rel_pos: Tensor::new(g.rel_pos.shape().to_vec(), rel).unwrap(),
        ..g.clone()
    }
}

#[test]
fn vpsa_is_invariant_to_neighbor_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let (n, c) = (16, 4);
        let mut cfg = BlockConfig::new(c, 6, 6);
        if trial % 2 == 1 {
            cfg.aggregation = Aggregation::MaxGroupconv;
            cfg.radius = Some(0.6);
        }
        let block = VpsaBlock::new("v", cfg).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        let pos = cloud(&mut rng, n);
        let g = block.grouping(&pos, 1, n, GeomOptions::default()).unwrap();
        let gp = permute_slots(&g, &mut rng);
        let f = Tensor::new(vec![n, c], feats(&mut rng, n, c)).unwrap();
        let run = |g: &Grouping| {
            let mut tape = GradTape::new();
            let x = tape.constant(f.clone());
            let y = block.forward(&mut tape, &store, x, g, Mode::Eval).unwrap();
            tape.value(y).clone()
        };
        assert!(run(&g).max_abs_diff(&run(&gp)) < 1e-9);
    }
}

#[test]
fn vpsa_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for m in 1..=3 {
        let (n, c, k) = (16, 8, 4);
        let mut cfg = BlockConfig::new(c, 8, k);
        cfg.vector_dim = m;
        let block = VpsaBlock::new("v", cfg).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        let (pos, f) = (cloud(&mut rng, n), feats(&mut rng, n, c));
        let y = block.apply(&store, &batch(pos.clone(), c, f.clone()), Mode::Train).unwrap();
        let ocfg = oracle::OracleBlock {
            prefix: "v",
            in_channels: c,
            out_channels: 8,
            k,
            m,
            sum_reduce: true,
            projection_bias: true,
            train: true,
        };
        let expected = oracle::brute_force_vpsa(&store, &ocfg, &pos, &f).unwrap();
        let diff = y.features().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "m={m}: {diff}");
    }
}

#[test]
fn vpsa_residual_width_mismatch_is_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let block = VpsaBlock::new("v", BlockConfig::new(3, 3, 2)).unwrap();
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng);
    store.insert("v.eta.weight", Tensor::zeros(&[3, 5]));
    store.insert("v.eta.bias", Tensor::zeros(&[5]));
    let x = batch(cloud(&mut rng, 5), 3, feats(&mut rng, 5, 3));
    assert!(matches!(block.apply(&store, &x, Mode::Eval), Err(Error::Config(_))));
}

fn field_grouping(groups: usize, k: usize) -> Grouping {
    Grouping {
        batch: 1,
        n_src: groups * k,
        m: groups,
        k,
        centers: (0..groups).collect(),
        nbr: (0..groups * k).collect(),
        pad: None,
        rel_pos: Tensor::zeros(&[groups * k, 3]),
        center_positions: vec![0.0; groups * 3],
    }
}

fn variant(block: &VpsaBlock, store: &ParamStore, v: &Tensor, g: &Grouping) -> Tensor {
    let mut tape = GradTape::new();
    let x = tape.constant(v.clone());
    let y = block.aggregation_variant(&mut tape, store, x, g).unwrap();
    tape.value(y).clone()
}

#[test]
fn sum_groupconv_is_affine_in_neighbor_multiplicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (c, m, k) = (4, 3, 5);
    let block = VpsaBlock::new("v", BlockConfig::new(c, 6, k)).unwrap();
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng);
    fill(&mut store, "v.hp.bias", 0.3);
    let one: Vec<f64> = (0..c * m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let single = variant(&block, &store, &Tensor::new(vec![1, c * m], one.clone()).unwrap(), &field_grouping(1, 1));
    let zero = variant(&block, &store, &Tensor::zeros(&[1, c * m]), &field_grouping(1, 1));
    let repeated: Vec<f64> = (0..k).flat_map(|_| one.clone()).collect();
    let many = variant(&block, &store, &Tensor::new(vec![k, c * m], repeated).unwrap(), &field_grouping(1, k));
    for o in 0..6 {
        let expected = k as f64 * (single.data()[o] - zero.data()[o]) + zero.data()[o];
        assert!((many.data()[o] - expected).abs() < 1e-12);
    }
}

#[test]
fn max_fc_with_zero_weights_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut cfg = BlockConfig::new(3, 4, 2);
    cfg.aggregation = Aggregation::MaxFc;
    let block = VpsaBlock::new("v", cfg).unwrap();
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng);
    fill(&mut store, "v.fc.weight", 0.0);
    store.insert("v.fc.bias", Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
    let v = Tensor::new(vec![6, 9], (0..54).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let y = variant(&block, &store, &v, &field_grouping(3, 2));
    for row in y.data().chunks(4) {
        assert_eq!(row, &[1.0, -2.0, 0.5, 3.0]);
    }
}

#[test]
fn sum_groupconv_equals_groupconv_with_shared_slot_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let (c, m, k, groups) = (rng.random_range(1..6), rng.random_range(1..4), rng.random_range(1..7), 3);
        let mut cfg = BlockConfig::new(c, 5, k);
        cfg.vector_dim = m;
        let sum_block = VpsaBlock::new("v", cfg.clone()).unwrap();
        cfg.aggregation = Aggregation::Groupconv;
        let slot_block = VpsaBlock::new("v", cfg).unwrap();
        let mut store = ParamStore::new();
        sum_block.init(&mut store, &mut rng);
        let (w, b) = (store.get("v.hp.weight").unwrap().clone(), store.get("v.hp.bias").unwrap().clone());
        let mut slots = vec![0.0; c * k * m];
        for ch in 0..c {
            for s in 0..k {
                slots[(ch * k + s) * m..][..m].copy_from_slice(&w.data()[ch * m..(ch + 1) * m]);
            }
        }
        store.insert("v.slots.weight", Tensor::new(vec![c, k, m], slots).unwrap());
        store.insert("v.slots.bias", b);
        let mut g = field_grouping(groups, k);
        let pad: Vec<bool> = (0..groups * k).map(|i| i % k != 0 && rng.random_bool(0.3)).collect();
        g.pad = Some(pad.into());
        let v = Tensor::new(
            vec![groups * k, c * m],
            (0..groups * k * c * m).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let a = variant(&sum_block, &store, &v, &g);
        let bb = variant(&slot_block, &store, &v, &g);
        assert!(a.max_abs_diff(&bb) < 1e-10);
    }
}

#[test]
fn reduce_then_project_equals_project_then_reduce() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (c, m, k, groups) = (rng.random_range(1..6), rng.random_range(1..4), rng.random_range(1..7), 4);
        let v = Tensor::new(
            vec![groups * k, c * m],
            (0..groups * k * c * m).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = Tensor::new(vec![c, m], (0..c * m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut tape = GradTape::new();
        let (vv, wv) = (tape.constant(v), tape.constant(w));
        let r = tape.neighbor_reduce(vv, k, Reduction::Sum, None).unwrap();
        let factored = tape.grouped_projection(r, wv, None).unwrap();
        let p = tape.grouped_projection(vv, wv, None).unwrap();
        let fused = tape.neighbor_reduce(p, k, Reduction::Sum, None).unwrap();
        assert!(tape.value(factored).max_abs_diff(tape.value(fused)) < 1e-12);
    }
}

#[test]
fn parameter_counts_order_like_the_aggregation_table() {
    let count = |a: Aggregation| {
        let mut cfg = BlockConfig::new(16, 16, 8);
        cfg.aggregation = a;
        block_params(&cfg)
    };
    let conv = count(Aggregation::Conv);
    let fc = count(Aggregation::SumFc).min(count(Aggregation::MaxFc));
    let fc_max = count(Aggregation::SumFc).max(count(Aggregation::MaxFc));
    let gc = count(Aggregation::SumGroupconv)
        .max(count(Aggregation::MaxGroupconv))
        .max(count(Aggregation::Groupconv));
    assert!(conv > fc_max && fc > gc, "conv {conv} fc {fc} gc {gc}");
    assert_eq!(count(Aggregation::SumGroupconv), count(Aggregation::MaxGroupconv));
}

#[test]
fn feature_propagation_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let block = FpBlock::new("fp", 2, 0, &[]);
    let store = ParamStore::new();
    let coarse = batch(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0], 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let y = block.apply(&store, &coarse, &[1.0, 0.0, 0.0], None, Mode::Eval).unwrap();
    assert!((y.data()[0] - 3.0).abs() < 1e-6 && (y.data()[1] - 4.0).abs() < 1e-6);

    let two = batch(vec![-1.0, 0.0, 0.0, 1.0, 0.0, 0.0], 2, vec![1.0, 2.0, 3.0, 6.0]);
    let y = block.apply(&store, &two, &[0.0, 0.5, 0.0], None, Mode::Eval).unwrap();
    assert!((y.data()[0] - 2.0).abs() < 1e-15 && (y.data()[1] - 4.0).abs() < 1e-15);

    let empty = Interpolation::build(&[], &cloud(&mut rng, 2), 1, 0, 2);
    assert!(matches!(empty, Err(Error::Size(_))));
}

#[test]
fn feature_propagation_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let (nc, nf, c, cs) = (rng.random_range(1..10), rng.random_range(1..30), 3, 2);
        let block = FpBlock::new("fp", c, cs, &[5, 4]);
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        let coarse = batch(cloud(&mut rng, nc), c, feats(&mut rng, nc, c));
        let fine = cloud(&mut rng, nf);
        let skip = feats(&mut rng, nf, cs);
        let y = block.apply(&store, &coarse, &fine, Some((&skip, cs)), Mode::Eval).unwrap();
        let expected = oracle::naive_feature_propagate(
            &store,
            "fp",
            false,
            coarse.positions(),
            coarse.features(),
            c,
            &fine,
            Some((&skip, cs)),
        )
        .unwrap();
        let diff = y.data().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }
}

#[test]
fn groupings_concatenate_with_row_offsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (a, b) = (cloud(&mut rng, 9), cloud(&mut rng, 9));
    let ga = Grouping::build(&a, 1, 9, 2, 3, None, GeomOptions::default()).unwrap();
    let gb = Grouping::build(&b, 1, 9, 2, 3, None, GeomOptions::default()).unwrap();
    let both: Vec<f64> = a.iter().chain(&b).copied().collect();
    let gab = Grouping::build(&both, 2, 9, 2, 3, None, GeomOptions::default()).unwrap();
    assert_eq!(Grouping::concat(&[&ga, &gb]).unwrap(), gab);
}

#[test]
fn blocks_pass_finite_difference_checks() {
    let names = [
        "mix_features",
        "encoder_rotation",
        "encoder_mlp",
        "encoder_direction",
        "slot_groupconv",
        "rotate_expand_3d",
        "rotate_expand_2d",
        "direction_field",
        "vpsa_block",
        "vpsa_block_max_fc",
        "vpsa_block_conv",
        "vpsa_block_groupconv",
        "sa_block",
        "fp_block",
        "cross_entropy",
        "shared_mlp",
    ];
    for check in gradcheck::registry().iter().filter(|c| names.contains(&c.name)) {
        let r = gradcheck::run_check(check, 20, 17).unwrap();
        assert!(r.passed(), "{}: {:e}", r.name, r.worst_rel_error);
    }
}
