//! Finite-difference gradient checks for every differentiable op and the
//! composed blocks.
//!
//! Each [`OpCheck`] builds random instances. An instance is a set of leaf
//! tensors plus a parameter store and a forward closure; the check compares
//! the tape gradient of `sum(w * forward(...))` for a fixed random `w`
//! against central differences.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nnops::{
    Activation, BackwardCtx, BnMode, GradTape, LinearBnAct, Mode, Op, ParamStore, Reduction,
    Tensor, Var,
};
use crate::oracle::fd_gradient;
use crate::setabs::{Aggregation, BlockConfig, FpBlock, GeomOptions, Interpolation, SaBlock, VpsaBlock};
use crate::vecenc::{EncoderKind, MixFeatures, VectorEncoder};

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_INSTANCES: usize = 20;
/// Floor on the denominator of the relative error. Gradients that vanish by
/// construction (a bias feeding batch normalization) leave only central
/// difference roundoff of about 1e-9, so below this norm the check becomes an
/// absolute one at `REL_TOLERANCE * NORM_FLOOR`.
pub const NORM_FLOOR: f64 = 1e-3;

type Forward = Box<dyn Fn(&mut GradTape, &ParamStore, &[Var]) -> Result<Var>>;

/// One random instance of a differentiable computation.
pub struct GradCase {
    pub inputs: Vec<Tensor>,
    pub store: ParamStore,
    pub forward: Forward,
}

impl GradCase {
    fn new(inputs: Vec<Tensor>, forward: impl Fn(&mut GradTape, &ParamStore, &[Var]) -> Result<Var> + 'static) -> Self {
        Self {
            inputs,
            store: ParamStore::new(),
            forward: Box::new(forward),
        }
    }

    fn with_store(mut self, store: ParamStore) -> Self {
        self.store = store;
        self
    }
}

#[derive(Clone, Copy)]
pub struct OpCheck {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> Result<GradCase>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst_rel_error: f64,
    /// Tape op names exercised by the instances.
    pub ops: BTreeSet<&'static str>,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_error < REL_TOLERANCE
    }
}

/// `||a - n|| / max(||a||, ||n||, NORM_FLOOR)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    diff / analytic.norm().max(numeric.norm()).max(NORM_FLOOR)
}

fn weighted_sum(tape: &GradTape, out: Var, w: &Tensor) -> f64 {
    tape.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn eval(case: &GradCase, inputs: &[Tensor], store: &ParamStore, w: &Tensor) -> Result<f64> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.forward)(&mut tape, store, &vars)?;
    Ok(weighted_sum(&tape, out, w))
}

/// Worst relative error over all inputs and parameters of one instance, and
/// the tape ops it ran.
pub fn check_case(case: &GradCase, rng: &mut impl Rng) -> Result<(f64, Vec<&'static str>)> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = (case.forward)(&mut tape, &case.store, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let w = Tensor::new(
        shape.clone(),
        (0..tape.value(out).numel()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let ops = tape.op_names();
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod)?;
    let grads = tape.backward(loss)?;
    let analytic_inputs: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let analytic_params = grads.into_param_grads();

    let mut worst: f64 = 0.0;
    for (i, a) in analytic_inputs.iter().enumerate() {
        let n = fd_gradient(
            |t| {
                let mut inputs = case.inputs.clone();
                inputs[i] = t.clone();
                eval(case, &inputs, &case.store, &w)
            },
            &case.inputs[i],
            FD_STEP,
        )?;
        worst = worst.max(relative_error(a, &n));
    }
    for (name, value) in case.store.params() {
        let n = fd_gradient(
            |t| {
                let mut store = case.store.clone();
                *store.get_mut(name).expect("present") = t.clone();
                eval(case, &case.inputs, &store, &w)
            },
            value,
            FD_STEP,
        )?;
        let a = analytic_params
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        worst = worst.max(relative_error(&a, &n));
    }
    Ok((worst, ops))
}

/// Runs `instances` random cases of `check`, seeded from `(seed, name)`.
pub fn run_check(check: &OpCheck, instances: usize, seed: u64) -> Result<OpReport> {
    let tag = check.name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    let mut worst: f64 = 0.0;
    let mut ops = BTreeSet::new();
    for _ in 0..instances {
        let case = (check.build)(&mut rng)?;
        let (err, names) = check_case(&case, &mut rng)?;
        worst = worst.max(err);
        ops.extend(names);
    }
    Ok(OpReport {
        name: check.name,
        instances,
        worst_rel_error: worst,
        ops,
    })
}

pub fn run_suite(checks: &[OpCheck], instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    checks.iter().map(|c| run_check(c, instances, seed)).collect()
}

// ---------------------------------------------------------------------------
// instance builders

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Uniform magnitudes in `[0.1, 1)` with random signs, so activations are
/// probed away from their kink.
fn off_kink(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Values that are pairwise at least `0.05` apart, shuffled.
fn separated(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 0.05 * i as f64 + rng.random_range(0.0..0.01)).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).expect("shape")
}

fn random_index(rng: &mut impl Rng, len: usize, max: usize) -> Arc<[usize]> {
    (0..len).map(|_| rng.random_range(0..max)).collect()
}

fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn linear_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (r, ci, co) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..5));
    Ok(GradCase::new(
        vec![uniform(rng, &[r, ci], -1.0, 1.0), uniform(rng, &[ci, co], -1.0, 1.0), uniform(rng, &[co], -1.0, 1.0)],
        |t, _, v| t.linear(v[0], v[1], Some(v[2])),
    ))
}

fn batchnorm_train_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (r, c) = (rng.random_range(2..7), rng.random_range(1..4));
    Ok(GradCase::new(
        vec![uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[c], 0.5, 1.5), uniform(rng, &[c], -1.0, 1.0)],
        |t, _, v| t.batchnorm(v[0], v[1], v[2], BnMode::Train { prefix: "check" }),
    ))
}

fn batchnorm_eval_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (r, c) = (rng.random_range(1..6), rng.random_range(1..4));
    let mean = uniform(rng, &[c], -0.5, 0.5).into_data();
    let var = uniform(rng, &[c], 0.5, 2.0).into_data();
    Ok(GradCase::new(
        vec![uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[c], 0.5, 1.5), uniform(rng, &[c], -1.0, 1.0)],
        move |t, _, v| t.batchnorm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var }),
    ))
}

fn relu_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let shape = [rng.random_range(1..5), rng.random_range(1..5)];
    Ok(GradCase::new(vec![off_kink(rng, &shape)], |t, _, v| t.relu(v[0])))
}

fn leaky_relu_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let shape = [rng.random_range(1..5), rng.random_range(1..5)];
    let slope = rng.random_range(0.01..0.3);
    Ok(GradCase::new(vec![off_kink(rng, &shape)], move |t, _, v| {
        t.activation(v[0], Activation::LeakyRelu(slope))
    }))
}

fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let shape = [rng.random_range(1..5), rng.random_range(1..5)];
    vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &shape, -1.0, 1.0)]
}

fn add_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    Ok(GradCase::new(pair(rng), |t, _, v| t.add(v[0], v[1])))
}

fn residual_fuse_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let shape = [rng.random_range(1..5), rng.random_range(1..5)];
    let skip = uniform(rng, &shape, -1.0, 1.0);
    let offset = off_kink(rng, &shape);
    let main = Tensor::new(
        shape.to_vec(),
        offset.data().iter().zip(skip.data()).map(|(o, s)| o - s).collect(),
    )?;
    Ok(GradCase::new(vec![main, skip], |t, _, v| t.residual_fuse(v[0], v[1])))
}

fn mul_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    Ok(GradCase::new(pair(rng), |t, _, v| t.mul(v[0], v[1])))
}

fn scale_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let s = rng.random_range(-2.0..2.0);
    let r = rng.random_range(1..5);
    let x = uniform(rng, &[r, 3], -1.0, 1.0);
    Ok(GradCase::new(vec![x], move |t, _, v| t.scale(v[0], s)))
}

fn sum_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let shape = [rng.random_range(1..5), rng.random_range(1..5)];
    let x = uniform(rng, &shape, -1.0, 1.0);
    Ok(GradCase::new(vec![x], |t, _, v| t.sum(v[0])))
}

fn mean_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let shape = [rng.random_range(1..5), rng.random_range(1..5)];
    let x = uniform(rng, &shape, -1.0, 1.0);
    Ok(GradCase::new(vec![x], |t, _, v| t.mean(v[0])))
}

fn reshape_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (a, b) = (rng.random_range(1..5), rng.random_range(1..5));
    let x = uniform(rng, &[a, b], -1.0, 1.0);
    Ok(GradCase::new(vec![x], move |t, _, v| t.reshape(v[0], vec![b, a])))
}

fn concat_cols_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let r = rng.random_range(1..5);
    let (ca, cb) = (rng.random_range(1..4), rng.random_range(1..4));
    let a = uniform(rng, &[r, ca], -1.0, 1.0);
    let b = uniform(rng, &[r, cb], -1.0, 1.0);
    Ok(GradCase::new(vec![a, b], |t, _, v| t.concat_cols(v[0], v[1])))
}

fn gather_rows_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let r = rng.random_range(1..5);
    let (c, len) = (rng.random_range(1..4), rng.random_range(1..8));
    let x = uniform(rng, &[r, c], -1.0, 1.0);
    let idx = random_index(rng, len, r);
    Ok(GradCase::new(vec![x], move |t, _, v| t.gather_rows(v[0], idx.clone())))
}

fn group_relative_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (n, k, g) = (rng.random_range(2..7), rng.random_range(1..4), rng.random_range(1..4));
    let c = rng.random_range(1..4);
    let x = uniform(rng, &[n, c], -1.0, 1.0);
    let nbr = random_index(rng, g * k, n);
    let centers = random_index(rng, g, n);
    Ok(GradCase::new(vec![x], move |t, _, v| {
        t.group_relative(v[0], nbr.clone(), centers.clone(), k)
    }))
}

fn pad_mask(rng: &mut impl Rng, groups: usize, k: usize) -> Arc<[bool]> {
    let mut pad: Vec<bool> = (0..groups * k).map(|_| rng.random_bool(0.3)).collect();
    for g in 0..groups {
        pad[g * k] = false;
    }
    pad.into()
}

fn neighbor_sum_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (g, k, d) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
    let pad = pad_mask(rng, g, k);
    Ok(GradCase::new(vec![uniform(rng, &[g * k, d], -1.0, 1.0)], move |t, _, v| {
        t.neighbor_reduce(v[0], k, Reduction::Sum, Some(pad.clone()))
    }))
}

fn neighbor_max_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (g, k, d) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
    let pad = pad_mask(rng, g, k);
    Ok(GradCase::new(vec![separated(rng, &[g * k, d])], move |t, _, v| {
        t.neighbor_reduce(v[0], k, Reduction::Max, Some(pad.clone()))
    }))
}

fn grouped_projection_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (r, c, m) = (rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..4));
    Ok(GradCase::new(
        vec![uniform(rng, &[r, c * m], -1.0, 1.0), uniform(rng, &[c, m], -1.0, 1.0), uniform(rng, &[c], -1.0, 1.0)],
        |t, _, v| t.grouped_projection(v[0], v[1], Some(v[2])),
    ))
}

fn mask_rows_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let r = rng.random_range(1..6);
    let mask: Arc<[bool]> = (0..r).map(|_| rng.random_bool(0.4)).collect();
    Ok(GradCase::new(vec![uniform(rng, &[r, 3], -1.0, 1.0)], move |t, _, v| {
        t.mask_rows(v[0], mask.clone())
    }))
}

fn interpolate_rows_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (n, per, out) = (rng.random_range(1..6), rng.random_range(1..4), rng.random_range(1..6));
    let idx = random_index(rng, out * per, n);
    let weights: Arc<[f64]> = (0..out * per).map(|_| rng.random_range(0.0..1.0)).collect();
    Ok(GradCase::new(vec![uniform(rng, &[n, 2], -1.0, 1.0)], move |t, _, v| {
        t.interpolate_rows(v[0], idx.clone(), weights.clone(), per)
    }))
}

fn rotate_expand_case(rng: &mut ChaCha8Rng, m: usize) -> Result<GradCase> {
    let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
    Ok(GradCase::new(
        vec![uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[r, c * (m - 1)], 0.0, 3.0)],
        move |t, _, v| t.rotate_expand(v[0], Some(v[1]), m),
    ))
}

fn rotate_expand3_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    rotate_expand_case(rng, 3)
}

fn rotate_expand2_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    rotate_expand_case(rng, 2)
}

fn direction_field_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (r, c, m) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(2..4));
    Ok(GradCase::new(
        vec![uniform(rng, &[r, c], -1.0, 1.0), off_kink(rng, &[r, c * m])],
        move |t, _, v| t.direction_field(v[0], v[1], m),
    ))
}

fn slot_groupconv_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (g, k, c, m) = (
        rng.random_range(1..4),
        rng.random_range(1..4),
        rng.random_range(1..4),
        rng.random_range(1..4),
    );
    let pad = pad_mask(rng, g, k);
    Ok(GradCase::new(
        vec![
            uniform(rng, &[g * k, c * m], -1.0, 1.0),
            uniform(rng, &[c, k, m], -1.0, 1.0),
            uniform(rng, &[c], -1.0, 1.0),
        ],
        move |t, _, v| t.slot_groupconv(v[0], v[1], v[2], k, Some(pad.clone())),
    ))
}

fn cross_entropy_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (s, k) = (rng.random_range(1..6), rng.random_range(2..5));
    let labels = random_index(rng, s, k);
    let eps = rng.random_range(0.0..0.3);
    Ok(GradCase::new(vec![uniform(rng, &[s, k], -2.0, 2.0)], move |t, _, v| {
        t.cross_entropy(v[0], labels.clone(), eps)
    }))
}

/// Replaces every bias with values away from zero so that no unit sits
/// exactly on an activation kink or a zero-length direction.
fn offset_biases(store: &mut ParamStore, rng: &mut impl Rng) {
    for (name, t) in store.params_mut() {
        if name.ends_with(".bias") {
            *t = off_kink(rng, t.shape());
        }
    }
}

fn mix_features_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (r, c) = (rng.random_range(1..5), rng.random_range(1..4));
    let mix = MixFeatures::new("mix", c);
    let mut store = ParamStore::new();
    mix.init(&mut store, rng);
    Ok(GradCase::new(
        vec![uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[r, 3], -1.0, 1.0)],
        move |t, s, v| mix.forward(t, s, v[0], v[1]),
    )
    .with_store(store))
}

fn encoder_case(rng: &mut ChaCha8Rng, kind: EncoderKind) -> Result<GradCase> {
    // a one-dimensional unit direction is a sign, flat almost everywhere, and
    // a single channel makes the normalized hidden layer blind to its weight
    let lowest_m = if kind == EncoderKind::Direction { 2 } else { 1 };
    let (r, c, m) = (rng.random_range(3..6), rng.random_range(2..4), rng.random_range(lowest_m..4));
    let enc = VectorEncoder::new("enc", kind, c, m)?;
    let mut store = ParamStore::new();
    enc.init(&mut store, rng);
    offset_biases(&mut store, rng);
    Ok(GradCase::new(vec![uniform(rng, &[r, c], -1.0, 1.0)], move |t, s, v| {
        enc.forward(t, s, v[0], Mode::Train)
    })
    .with_store(store))
}

fn encoder_rotation_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    encoder_case(rng, EncoderKind::Rotation)
}

fn encoder_mlp_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    encoder_case(rng, EncoderKind::Mlp)
}

fn encoder_direction_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    encoder_case(rng, EncoderKind::Direction)
}

fn vpsa_case(rng: &mut ChaCha8Rng, aggregation: Aggregation) -> Result<GradCase> {
    let (n, c, k) = (8, 4, 2);
    let mut cfg = BlockConfig::new(c, c, k);
    cfg.aggregation = aggregation;
    let block = VpsaBlock::new("vpsa", cfg)?;
    let mut store = ParamStore::new();
    block.init(&mut store, rng);
    offset_biases(&mut store, rng);
    let g = block.grouping(&random_cloud(rng, n), 1, n, GeomOptions::default())?;
    Ok(GradCase::new(vec![uniform(rng, &[n, c], -1.0, 1.0)], move |t, s, v| {
        block.forward(t, s, v[0], &g, Mode::Train)
    })
    .with_store(store))
}

fn vpsa_block_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    vpsa_case(rng, Aggregation::SumGroupconv)
}

fn vpsa_max_fc_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    vpsa_case(rng, Aggregation::MaxFc)
}

fn vpsa_conv_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    vpsa_case(rng, Aggregation::Conv)
}

fn vpsa_groupconv_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    vpsa_case(rng, Aggregation::Groupconv)
}

fn sa_block_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (n, c) = (8, 3);
    let mut cfg = BlockConfig::new(c, 4, 3);
    cfg.stride = 2;
    cfg.radius = Some(0.8);
    let block = SaBlock::new("sa", cfg, 1)?;
    let mut store = ParamStore::new();
    block.init(&mut store, rng);
    offset_biases(&mut store, rng);
    let g = block.grouping(&random_cloud(rng, n), 1, n, GeomOptions::default())?;
    Ok(GradCase::new(vec![uniform(rng, &[n, c], -1.0, 1.0)], move |t, s, v| {
        block.forward(t, s, v[0], &g, Mode::Train)
    })
    .with_store(store))
}

fn fp_block_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let (nc, nf, cc, cs) = (4, 8, 3, 2);
    let block = FpBlock::new("fp", cc, cs, &[4]);
    let mut store = ParamStore::new();
    block.init(&mut store, rng);
    let interp = Interpolation::build(&random_cloud(rng, nc), &random_cloud(rng, nf), 1, nc, nf)?;
    Ok(GradCase::new(
        vec![uniform(rng, &[nc, cc], -1.0, 1.0), uniform(rng, &[nf, cs], -1.0, 1.0)],
        move |t, s, v| block.forward(t, s, v[0], Some(v[1]), &interp, Mode::Train),
    )
    .with_store(store))
}

fn shared_mlp_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let layer = LinearBnAct::new("mlp", 3, 4, Some(Activation::Relu));
    let mut store = ParamStore::new();
    layer.init(&mut store, rng);
    Ok(GradCase::new(vec![uniform(rng, &[6, 3], -1.0, 1.0)], move |t, s, v| {
        layer.forward(t, s, v[0], Mode::Train)
    })
    .with_store(store))
}

/// Every registered check, primitive ops first.
pub fn registry() -> Vec<OpCheck> {
    macro_rules! checks {
        ($($name:literal => $f:ident),* $(,)?) => {
            vec![$(OpCheck { name: $name, build: $f }),*]
        };
    }
    checks![
        "linear" => linear_case,
        "batchnorm_train" => batchnorm_train_case,
        "batchnorm_eval" => batchnorm_eval_case,
        "relu" => relu_case,
        "leaky_relu" => leaky_relu_case,
        "add" => add_case,
        "residual_fuse" => residual_fuse_case,
        "mul" => mul_case,
        "scale" => scale_case,
        "sum" => sum_case,
        "mean" => mean_case,
        "reshape" => reshape_case,
        "concat_cols" => concat_cols_case,
        "gather_rows" => gather_rows_case,
        "group_relative" => group_relative_case,
        "neighbor_reduce_sum" => neighbor_sum_case,
        "neighbor_reduce_max" => neighbor_max_case,
        "grouped_projection" => grouped_projection_case,
        "mask_rows" => mask_rows_case,
        "interpolate_rows" => interpolate_rows_case,
        "rotate_expand_3d" => rotate_expand3_case,
        "rotate_expand_2d" => rotate_expand2_case,
        "direction_field" => direction_field_case,
        "slot_groupconv" => slot_groupconv_case,
        "cross_entropy" => cross_entropy_case,
        "shared_mlp" => shared_mlp_case,
        "mix_features" => mix_features_case,
        "encoder_rotation" => encoder_rotation_case,
        "encoder_mlp" => encoder_mlp_case,
        "encoder_direction" => encoder_direction_case,
        "vpsa_block" => vpsa_block_case,
        "vpsa_block_max_fc" => vpsa_max_fc_case,
        "vpsa_block_conv" => vpsa_conv_case,
        "vpsa_block_groupconv" => vpsa_groupconv_case,
        "sa_block" => sa_block_case,
        "fp_block" => fp_block_case,
    ]
}

// ---------------------------------------------------------------------------
// fault-injection fixture

/// A linear map whose backward drops the bias gradient and scales the input
/// gradient; used to confirm that the suite catches a broken op.
struct CorruptedLinearOp;

impl Op for CorruptedLinearOp {
    fn name(&self) -> &'static str {
        "corrupted_linear"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (r, ci, co) = (x.rows(), x.cols(), w.cols());
        let g = ctx.grad.data();
        let mut dx = vec![0.0; r * ci];
        for i in 0..r {
            for a in 0..ci {
                dx[i * ci + a] = 1.1 * (0..co).map(|o| g[i * co + o] * w.data()[a * co + o]).sum::<f64>();
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx)?), Some(Tensor::zeros(w.shape()))])
    }
}

fn corrupted_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    Ok(GradCase::new(
        vec![uniform(rng, &[3, 2], -1.0, 1.0), uniform(rng, &[2, 2], -1.0, 1.0)],
        |t, _, v| {
            let (x, w) = (t.value(v[0]), t.value(v[1]));
            let mut out = vec![0.0; 3 * 2];
            for i in 0..3 {
                for o in 0..2 {
                    out[i * 2 + o] = (0..2).map(|a| x.data()[i * 2 + a] * w.data()[a * 2 + o]).sum();
                }
            }
            let out = Tensor::new(vec![3, 2], out)?;
            t.record(Box::new(CorruptedLinearOp), &[v[0], v[1]], out)
        },
    ))
}

/// A check that must fail; not part of [`registry`].
pub fn corrupted_fixture() -> OpCheck {
    OpCheck {
        name: "corrupted_linear",
        build: corrupted_case,
    }
}

/// Builds a descriptive error for the first failing report.
pub fn first_failure(reports: &[OpReport]) -> Option<Error> {
    reports.iter().find(|r| !r.passed()).map(|r| {
        Error::NumericFault {
            layer: r.name.to_string(),
            detail: format!(
                "gradient check relative error {:.3e} exceeds {REL_TOLERANCE:e}",
                r.worst_rel_error
            ),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_of_identical_gradients_is_zero() {
        let a = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        assert_eq!(relative_error(&a, &a), 0.0);
    }

    #[test]
    fn corrupted_fixture_fails() {
        let r = run_check(&corrupted_fixture(), 3, 0).unwrap();
        assert!(!r.passed(), "{r:?}");
    }

    #[test]
    fn registry_names_are_unique() {
        let names: BTreeSet<_> = registry().iter().map(|c| c.name).collect();
        assert_eq!(names.len(), registry().len());
    }
}
