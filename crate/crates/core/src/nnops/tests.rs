use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::gradcheck;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn linear_identity_and_bias_only() {
    let mut tape = GradTape::new();
    let x = tape.constant(t(&[2, 2], &[1.0, -2.0, 3.5, 0.25]));
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = tape.linear(x, eye, None).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.5, 0.25]);

    let zero = tape.constant(Tensor::zeros(&[2, 2]));
    let b = tape.constant(t(&[2], &[1.0, 2.0]));
    let y = tape.linear(x, zero, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 1.0, 2.0]);
}

#[test]
fn linear_rejects_width_mismatch() {
    let mut tape = GradTape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let w = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.linear(x, w, None), Err(Error::Size(_))));
}

fn bn(tape: &mut GradTape, x: Tensor, gamma: f64, beta: f64) -> crate::Result<Var> {
    let c = x.cols();
    let x = tape.constant(x);
    let g = tape.constant(Tensor::filled(&[c], gamma));
    let b = tape.constant(Tensor::filled(&[c], beta));
    tape.batchnorm(x, g, b, BnMode::Train { prefix: "bn" })
}

#[test]
fn batchnorm_examples() {
    let mut tape = GradTape::new();
    let y = bn(&mut tape, Tensor::filled(&[4, 2], 3.0), 1.0, 0.0).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(vec![5, 3], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let y = bn(&mut tape, x, 0.0, 5.0).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
}

#[test]
fn batchnorm_normalizes_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (rows, c) = (37, 4);
    let x = Tensor::new(
        vec![rows, c],
        (0..rows * c).map(|_| rng.random_range(-10.0..10.0)).collect(),
    )
    .unwrap();
    // the biased variance of the normalized output is var / (var + eps)
    let mut var_in = vec![0.0; c];
    let mut mean_in = vec![0.0; c];
    for r in 0..rows {
        for j in 0..c {
            mean_in[j] += x.row(r)[j] / rows as f64;
        }
    }
    for r in 0..rows {
        for j in 0..c {
            var_in[j] += (x.row(r)[j] - mean_in[j]).powi(2) / rows as f64;
        }
    }
    let mut tape = GradTape::new();
    let y = bn(&mut tape, x, 1.0, 0.0).unwrap();
    let y = tape.value(y);
    for j in 0..c {
        let mean: f64 = (0..rows).map(|r| y.row(r)[j]).sum::<f64>() / rows as f64;
        let var: f64 = (0..rows).map(|r| (y.row(r)[j] - mean).powi(2)).sum::<f64>() / rows as f64;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        let expected = var_in[j] / (var_in[j] + BN_EPS);
        assert!((var - expected).abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6, "variance {var}");
    }
}

#[test]
fn batchnorm_train_needs_two_samples() {
    let mut tape = GradTape::new();
    let r = bn(&mut tape, Tensor::zeros(&[1, 3]), 1.0, 0.0);
    assert!(matches!(r, Err(Error::DegenerateStatistics(_))));
}

#[test]
fn batchnorm_running_stats_update_with_momentum() {
    let mut store = ParamStore::new();
    store.init_batchnorm("bn", 1);
    let layer = BatchNorm::new("bn", 1);
    let mut tape = GradTape::new();
    let x = tape.constant(t(&[2, 1], &[1.0, 3.0]));
    layer.forward(&mut tape, &store, x, Mode::Train).unwrap();
    let updates = tape.running_updates().to_vec();
    store.apply_running_updates(&updates).unwrap();
    assert!((store.buffer("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-15);
    // unbiased batch variance 2, blended with the initial 1
    assert!((store.buffer("bn.running_var").unwrap().data()[0] - 1.1).abs() < 1e-15);
}

#[test]
fn activation_examples() {
    let mut tape = GradTape::new();
    let x = tape.variable(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(t(&[1], &[-2.0]));
    let l = tape.activation(z, Activation::LeakyRelu(0.1)).unwrap();
    assert!((tape.value(l).data()[0] + 0.2).abs() < 1e-15);

    let mut tape = GradTape::new();
    let x = tape.variable(t(&[2], &[3.0, -3.0]));
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0, 0.0]);
}

#[test]
fn neighbor_reduce_examples() {
    let mut tape = GradTape::new();
    let v = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let s = tape.neighbor_reduce(v, 2, Reduction::Sum, None).unwrap();
    assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
    let m = tape.neighbor_reduce(v, 2, Reduction::Max, None).unwrap();
    assert_eq!(tape.value(m).data(), &[3.0, 4.0]);
}

#[test]
fn neighbor_sum_skips_padded_duplicates() {
    let mut tape = GradTape::new();
    let v = tape.constant(t(&[3, 1], &[2.0, 5.0, 2.0]));
    let pad: Arc<[bool]> = vec![false, false, true].into();
    let s = tape.neighbor_reduce(v, 3, Reduction::Sum, Some(pad)).unwrap();
    assert_eq!(tape.value(s).data(), &[7.0]);
}

#[test]
fn neighbor_reduce_all_padded_is_invalid() {
    let mut tape = GradTape::new();
    let v = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let pad: Arc<[bool]> = vec![true, true].into();
    let r = tape.neighbor_reduce(v, 2, Reduction::Max, Some(pad));
    assert!(matches!(r, Err(Error::InvalidNeighborhood(_))));
}

#[test]
fn neighbor_max_ties_route_gradient_to_first() {
    let mut tape = GradTape::new();
    let v = tape.variable(t(&[3, 1], &[4.0, 4.0, 1.0]));
    let m = tape.neighbor_reduce(v, 3, Reduction::Max, None).unwrap();
    let s = tape.sum(m).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(v).data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn neighbor_reduce_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (k, d) = (rng.random_range(1..9), rng.random_range(1..5));
        let data: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<f64> = perm.iter().flat_map(|&p| data[p * d..(p + 1) * d].to_vec()).collect();
        for mode in [Reduction::Sum, Reduction::Max] {
            let mut tape = GradTape::new();
            let a = tape.constant(t(&[k, d], &data));
            let b = tape.constant(t(&[k, d], &shuffled));
            let ra = tape.neighbor_reduce(a, k, mode, None).unwrap();
            let rb = tape.neighbor_reduce(b, k, mode, None).unwrap();
            let diff = tape.value(ra).max_abs_diff(tape.value(rb));
            match mode {
                Reduction::Sum => assert!(diff < 1e-9),
                Reduction::Max => assert_eq!(diff, 0.0),
            }
        }
    }
}

#[test]
fn grouped_projection_examples() {
    let mut tape = GradTape::new();
    let v = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
    let w = tape.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
    let y = tape.grouped_projection(v, w, None).unwrap();
    assert_eq!(tape.value(y).data(), &[6.0]);

    let v = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
    let w = tape.constant(Tensor::zeros(&[2, 2]));
    let b = tape.constant(t(&[2], &[0.5, -1.5]));
    let y = tape.grouped_projection(v, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);

    let w3 = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.grouped_projection(v, w3, None), Err(Error::Size(_))));
}

#[test]
fn grouped_projection_matches_block_diagonal_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (r, c, m) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..4));
        let v: Vec<f64> = (0..r * c * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..c * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        // dense [c*m, c] matrix with w[c] on the c-th diagonal block
        let mut dense = vec![0.0; c * m * c];
        for ch in 0..c {
            for d in 0..m {
                dense[(ch * m + d) * c + ch] = w[ch * m + d];
            }
        }
        let mut tape = GradTape::new();
        let vv = tape.constant(t(&[r, c * m], &v));
        let wv = tape.constant(t(&[c, m], &w));
        let dv = tape.constant(t(&[c * m, c], &dense));
        let a = tape.grouped_projection(vv, wv, None).unwrap();
        let b = tape.linear(vv, dv, None).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);
    }
}

#[test]
fn residual_fuse_examples() {
    let mut tape = GradTape::new();
    let main = tape.variable(t(&[3], &[1.0, -2.0, 0.5]));
    let neg = tape.constant(t(&[3], &[-1.0, 2.0, -0.5]));
    let y = tape.residual_fuse(main, neg).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let zero = tape.variable(Tensor::zeros(&[3]));
    let y = tape.residual_fuse(main, zero).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.5]);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(main).data(), &[1.0, 0.0, 1.0]);
    assert_eq!(g.wrt(zero).data(), &[1.0, 0.0, 1.0]);
}

#[test]
fn residual_fuse_rejects_shape_mismatch() {
    let mut tape = GradTape::new();
    let a = tape.constant(Tensor::zeros(&[2, 2]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.residual_fuse(a, b), Err(Error::Size(_))));
}

#[test]
fn backward_examples() {
    let mut tape = GradTape::new();
    let x = tape.variable(t(&[3], &[1.0, -2.0, 0.5]));
    let unused = tape.variable(t(&[2], &[4.0, 4.0]));
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, -4.0, 1.0]);
    assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = GradTape::new();
    let x = tape.variable(t(&[2], &[1.0, 2.0]));
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn non_finite_forward_is_a_numeric_fault() {
    let mut tape = GradTape::new();
    let x = tape.constant(t(&[1], &[f64::MAX]));
    let r = tape.scale(x, 10.0);
    assert!(matches!(r, Err(Error::NumericFault { .. })));
}

#[test]
fn param_gradients_have_parameter_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let layer = LinearBnAct::new("l", 3, 2, Some(Activation::Relu));
    layer.init(&mut store, &mut rng);
    let mut tape = GradTape::new();
    let x = tape.constant(Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
    let y = layer.forward(&mut tape, &store, x, Mode::Train).unwrap();
    let l = tape.sum(y).unwrap();
    let grads = tape.backward(l).unwrap().into_param_grads();
    for (name, p) in store.params() {
        assert_eq!(grads[name].shape(), p.shape(), "{name}");
    }
}

#[test]
fn primitive_ops_pass_finite_difference_checks() {
    let primitives = [
        "linear",
        "batchnorm_train",
        "batchnorm_eval",
        "relu",
        "leaky_relu",
        "add",
        "residual_fuse",
        "mul",
        "scale",
        "sum",
        "mean",
        "reshape",
        "concat_cols",
        "gather_rows",
        "group_relative",
        "neighbor_reduce_sum",
        "neighbor_reduce_max",
        "grouped_projection",
        "mask_rows",
        "interpolate_rows",
    ];
    for check in gradcheck::registry().iter().filter(|c| primitives.contains(&c.name)) {
        let r = gradcheck::run_check(check, 20, 11).unwrap();
        assert!(r.passed(), "{}: {:e}", r.name, r.worst_rel_error);
    }
}
