//! Brute-force references for testing: finite differences, exhaustive
//! neighbor search, and nested-loop versions of the set-abstraction blocks.
//!
//! Nothing here calls into `geometry`, `setabs` or `vecenc`; the only shared
//! pieces are the tensor container and the parameter store, which are read
//! as plain arrays.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nnops::{ParamStore, Tensor, BN_EPS};

/// Largest `B*N*C*k` accepted by the nested-loop block references.
pub const ORACLE_SIZE_LIMIT: usize = 10_000;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn fd_gradient(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, g) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Oracle(format!("non-finite evaluation at coordinate {i}")));
        }
        *g = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for d in 0..3 {
        s += (a[d] - b[d]) * (a[d] - b[d]);
    }
    s
}

/// The `k` nearest points of `positions` (`[n][3]`) to `query`, by full sort
/// on `(distance, index)`.
pub fn naive_knn(positions: &[f64], query: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = positions.len() / 3;
    if k > n {
        return Err(Error::Oracle(format!("k={k} exceeds {n} points")));
    }
    let mut all: Vec<(f64, usize)> = Vec::with_capacity(n);
    for j in 0..n {
        all.push((dist2(&positions[j * 3..j * 3 + 3], query), j));
    }
    // insertion sort keeps the reference free of library ordering helpers
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 && (all[j].0 < all[j - 1].0 || (all[j].0 == all[j - 1].0 && all[j].1 < all[j - 1].1)) {
            all.swap(j, j - 1);
            j -= 1;
        }
    }
    Ok(all[..k].iter().map(|&(_, j)| j).collect())
}

/// Up to `k` points within `radius` in scan order, padded with the first hit.
/// Returns `(indices, pad)`.
pub fn naive_ball_query(positions: &[f64], query: &[f64], radius: f64, k: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    let n = positions.len() / 3;
    let mut hits = Vec::new();
    for j in 0..n {
        if hits.len() == k {
            break;
        }
        if dist2(&positions[j * 3..j * 3 + 3], query) <= radius * radius {
            hits.push(j);
        }
    }
    if hits.is_empty() {
        return Err(Error::Oracle("empty neighborhood".into()));
    }
    let mut pad = vec![false; hits.len()];
    while hits.len() < k {
        hits.push(hits[0]);
        pad.push(true);
    }
    Ok((hits, pad))
}

/// Farthest point sampling by recomputing every min-distance from scratch.
pub fn naive_fps(positions: &[f64], m: usize, start: usize) -> Vec<usize> {
    let n = positions.len() / 3;
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best = (f64::NEG_INFINITY, 0);
        for j in 0..n {
            let mut dmin = f64::INFINITY;
            for &c in &chosen {
                dmin = dmin.min(dist2(&positions[j * 3..j * 3 + 3], &positions[c * 3..c * 3 + 3]));
            }
            if dmin > best.0 {
                best = (dmin, j);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

/// Inverse-squared-distance interpolation of `coarse_feat` (`[nc][c]`) onto
/// each fine point from its `min(3, nc)` nearest coarse points.
pub fn naive_interpolate(
    coarse_pos: &[f64],
    coarse_feat: &[f64],
    c: usize,
    fine_pos: &[f64],
) -> Result<Vec<f64>> {
    let nc = coarse_pos.len() / 3;
    if nc == 0 {
        return Err(Error::Oracle("empty coarse set".into()));
    }
    let nf = fine_pos.len() / 3;
    let per = nc.min(3);
    let mut out = vec![0.0; nf * c];
    for i in 0..nf {
        let q = &fine_pos[i * 3..i * 3 + 3];
        let nn = naive_knn(coarse_pos, q, per)?;
        let mut w = Vec::new();
        for &j in &nn {
            w.push(1.0 / (dist2(&coarse_pos[j * 3..j * 3 + 3], q) + 1e-8));
        }
        let total: f64 = w.iter().sum();
        for (s, &j) in nn.iter().enumerate() {
            for ch in 0..c {
                out[i * c + ch] += w[s] / total * coarse_feat[j * c + ch];
            }
        }
    }
    Ok(out)
}

fn param<'a>(store: &'a ParamStore, name: &str) -> Result<&'a Tensor> {
    store
        .get(name)
        .or_else(|| store.buffer(name))
        .ok_or_else(|| Error::Oracle(format!("missing tensor `{name}`")))
}

/// `y = x W (+ b)` over rows, with `W: [cin, cout]`.
fn loop_linear(store: &ParamStore, prefix: &str, x: &[Vec<f64>], bias: bool) -> Result<Vec<Vec<f64>>> {
    let w = param(store, &format!("{prefix}.weight"))?;
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let b = if bias {
        Some(param(store, &format!("{prefix}.bias"))?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(x.len());
    for row in x {
        if row.len() != cin {
            return Err(Error::Oracle(format!("{prefix}: width {} vs {cin}", row.len())));
        }
        let mut y = vec![0.0; cout];
        for (o, yo) in y.iter_mut().enumerate() {
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for (i, xi) in row.iter().enumerate() {
                acc += xi * w.data()[i * cout + o];
            }
            *yo = acc;
        }
        out.push(y);
    }
    Ok(out)
}

/// Batch normalization over rows; batch statistics when `train`, running
/// statistics otherwise.
fn loop_batchnorm(store: &ParamStore, prefix: &str, x: &mut [Vec<f64>], train: bool) -> Result<()> {
    let gamma = param(store, &format!("{prefix}.gamma"))?;
    let beta = param(store, &format!("{prefix}.beta"))?;
    let c = gamma.numel();
    let (mean, var) = if train {
        let n = x.len() as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in x.iter() {
            for ch in 0..c {
                mean[ch] += row[ch] / n;
            }
        }
        for row in x.iter() {
            for ch in 0..c {
                var[ch] += (row[ch] - mean[ch]).powi(2) / n;
            }
        }
        (mean, var)
    } else {
        (
            param(store, &format!("{prefix}.running_mean"))?.data().to_vec(),
            param(store, &format!("{prefix}.running_var"))?.data().to_vec(),
        )
    };
    for row in x.iter_mut() {
        for ch in 0..c {
            row[ch] = gamma.data()[ch] * (row[ch] - mean[ch]) / (var[ch] + BN_EPS).sqrt() + beta.data()[ch];
        }
    }
    Ok(())
}

fn relu_rows(x: &mut [Vec<f64>]) {
    for row in x {
        for v in row {
            *v = v.max(0.0);
        }
    }
}

/// Block hyperparameters for the nested-loop references.
#[derive(Clone, Debug)]
pub struct OracleBlock<'a> {
    pub prefix: &'a str,
    pub in_channels: usize,
    pub out_channels: usize,
    pub k: usize,
    /// 1 (scalar), 2 or 3.
    pub m: usize,
    /// Sum when true, max otherwise.
    pub sum_reduce: bool,
    pub projection_bias: bool,
    /// Batch statistics in every normalization.
    pub train: bool,
}

/// Rotation-encoder vector block on a single cloud with stride 1 and
/// k-nearest-neighbor grouping, computed with scalar loops.
///
/// `positions: [n][3]`, `features: [n][c]`; returns `[n][c_out]`.
pub fn brute_force_vpsa(
    store: &ParamStore,
    cfg: &OracleBlock<'_>,
    positions: &[f64],
    features: &[f64],
) -> Result<Vec<f64>> {
    let n = positions.len() / 3;
    let (c, k, m) = (cfg.in_channels, cfg.k, cfg.m);
    if n * c * k > ORACLE_SIZE_LIMIT {
        return Err(Error::Oracle(format!("instance too large: {}", n * c * k)));
    }
    if features.len() != n * c {
        return Err(Error::Oracle("feature buffer does not match".into()));
    }
    let p = cfg.prefix;
    let f = |i: usize, ch: usize| features[i * c + ch];

    // neighbor rows: fp_j = relu(f_j - f_i + pos(p_j - p_i))
    let mut nbrs = Vec::with_capacity(n);
    let mut rel_feat = Vec::with_capacity(n * k);
    let mut rel_pos = Vec::with_capacity(n * k);
    for i in 0..n {
        let nn = naive_knn(positions, &positions[i * 3..i * 3 + 3], k.min(n))?;
        let mut full = nn.clone();
        while full.len() < k {
            full.push(nn[0]);
        }
        for &j in &full {
            rel_feat.push((0..c).map(|ch| f(j, ch) - f(i, ch)).collect::<Vec<_>>());
            rel_pos.push((0..3).map(|d| positions[j * 3 + d] - positions[i * 3 + d]).collect::<Vec<_>>());
        }
        nbrs.push((full, nn.len()));
    }
    let pos = loop_linear(store, &format!("{p}.mix.pos"), &rel_pos, true)?;
    let mut fp = rel_feat;
    for (row, prow) in fp.iter_mut().zip(&pos) {
        for (a, b) in row.iter_mut().zip(prow) {
            *a = (*a + b).max(0.0);
        }
    }

    // rotation encoder
    let zx = loop_linear(store, &format!("{p}.encoder.zx"), &fp, true)?;
    let angles = if m > 1 {
        let mut a = loop_linear(store, &format!("{p}.encoder.angles.linear"), &fp, false)?;
        loop_batchnorm(store, &format!("{p}.encoder.angles.norm"), &mut a, cfg.train)?;
        relu_rows(&mut a);
        Some(a)
    } else {
        None
    };
    let mut field = Vec::with_capacity(fp.len());
    for r in 0..fp.len() {
        let mut v = vec![0.0; c * m];
        for ch in 0..c {
            let z = zx[r][ch];
            match (m, &angles) {
                (3, Some(a)) => {
                    let (al, be) = (a[r][ch], a[r][c + ch]);
                    // Rot_z(al) * Rot_x(be) applied to (0, z, 0), one matrix entry at a time
                    let rx = [[1.0, 0.0, 0.0], [0.0, be.sin(), -be.cos()], [0.0, be.cos(), be.sin()]];
                    let rz = [[al.cos(), -al.sin(), 0.0], [al.sin(), al.cos(), 0.0], [0.0, 0.0, 1.0]];
                    let x0 = [0.0, z, 0.0];
                    let mut t = [0.0; 3];
                    for a_ in 0..3 {
                        for b_ in 0..3 {
                            t[a_] += rx[a_][b_] * x0[b_];
                        }
                    }
                    for a_ in 0..3 {
                        for b_ in 0..3 {
                            v[ch * 3 + a_] += rz[a_][b_] * t[b_];
                        }
                    }
                }
                (2, Some(a)) => {
                    let al = a[r][ch];
                    v[ch * 2] = -z * al.sin();
                    v[ch * 2 + 1] = z * al.cos();
                }
                _ => v[ch] = z,
            }
        }
        field.push(v);
    }

    // reduce over real neighbors, project, mix, residual
    let hp_w = param(store, &format!("{p}.hp.weight"))?;
    let hp_b = if cfg.projection_bias {
        Some(param(store, &format!("{p}.hp.bias"))?)
    } else {
        None
    };
    let mut scalars = Vec::with_capacity(n);
    for (i, (_, real)) in nbrs.iter().enumerate() {
        let mut red = vec![if cfg.sum_reduce { 0.0 } else { f64::NEG_INFINITY }; c * m];
        for s in 0..*real {
            let row = &field[i * k + s];
            for t in 0..c * m {
                red[t] = if cfg.sum_reduce { red[t] + row[t] } else { red[t].max(row[t]) };
            }
        }
        let mut sc = vec![0.0; c];
        for ch in 0..c {
            let mut acc = hp_b.map_or(0.0, |b| b.data()[ch]);
            for d in 0..m {
                acc += red[ch * m + d] * hp_w.data()[ch * m + d];
            }
            sc[ch] = acc;
        }
        scalars.push(sc);
    }
    let main = loop_linear(store, &format!("{p}.hc"), &scalars, true)?;
    let centers: Vec<Vec<f64>> = (0..n).map(|i| (0..c).map(|ch| f(i, ch)).collect()).collect();
    let skip = loop_linear(store, &format!("{p}.eta"), &centers, true)?;
    let mut out = Vec::with_capacity(n * cfg.out_channels);
    for i in 0..n {
        for o in 0..cfg.out_channels {
            out.push((main[i][o] + skip[i][o]).max(0.0));
        }
    }
    Ok(out)
}

/// Single-cloud SA block: FPS by `stride`, kNN grouping, one
/// Linear-BN-ReLU layer on `[f_j, p_j - p_i]`, max over neighbors.
/// Returns `(center indices, features [m][c_out])`.
pub fn naive_sa(
    store: &ParamStore,
    cfg: &OracleBlock<'_>,
    stride: usize,
    positions: &[f64],
    features: &[f64],
) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = positions.len() / 3;
    let (c, k) = (cfg.in_channels, cfg.k);
    if n * c * k > ORACLE_SIZE_LIMIT {
        return Err(Error::Oracle(format!("instance too large: {}", n * c * k)));
    }
    let m = n.div_ceil(stride);
    let centers = if stride == 1 { (0..n).collect() } else { naive_fps(positions, m, 0) };
    let mut rows = Vec::new();
    let mut real = Vec::new();
    for &i in &centers {
        let nn = naive_knn(positions, &positions[i * 3..i * 3 + 3], k.min(n))?;
        real.push(nn.len());
        for s in 0..k {
            let j = if s < nn.len() { nn[s] } else { nn[0] };
            let mut row: Vec<f64> = (0..c).map(|ch| features[j * c + ch]).collect();
            row.extend((0..3).map(|d| positions[j * 3 + d] - positions[i * 3 + d]));
            rows.push(row);
        }
    }
    let mut h = loop_linear(store, &format!("{}.mlp0.linear", cfg.prefix), &rows, false)?;
    loop_batchnorm(store, &format!("{}.mlp0.norm", cfg.prefix), &mut h, cfg.train)?;
    relu_rows(&mut h);
    let co = cfg.out_channels;
    let mut out = vec![f64::NEG_INFINITY; centers.len() * co];
    for (g, &r) in real.iter().enumerate() {
        for s in 0..r {
            for o in 0..co {
                out[g * co + o] = out[g * co + o].max(h[g * k + s][o]);
            }
        }
    }
    Ok((centers, out))
}

/// Feature propagation on one cloud: interpolation, skip concatenation and
/// Linear-BN-ReLU layers `{prefix}.mlp{l}` until the store runs out.
pub fn naive_feature_propagate(
    store: &ParamStore,
    prefix: &str,
    train: bool,
    coarse_pos: &[f64],
    coarse_feat: &[f64],
    c: usize,
    fine_pos: &[f64],
    skip: Option<(&[f64], usize)>,
) -> Result<Vec<f64>> {
    let up = naive_interpolate(coarse_pos, coarse_feat, c, fine_pos)?;
    let nf = fine_pos.len() / 3;
    let mut h: Vec<Vec<f64>> = (0..nf)
        .map(|i| {
            let mut row = up[i * c..(i + 1) * c].to_vec();
            if let Some((s, cs)) = skip {
                row.extend_from_slice(&s[i * cs..(i + 1) * cs]);
            }
            row
        })
        .collect();
    let mut l = 0;
    while store.get(&format!("{prefix}.mlp{l}.linear.weight")).is_some() {
        h = loop_linear(store, &format!("{prefix}.mlp{l}.linear"), &h, false)?;
        loop_batchnorm(store, &format!("{prefix}.mlp{l}.norm"), &mut h, train)?;
        relu_rows(&mut h);
        l += 1;
    }
    Ok(h.concat())
}

/// `a1*a4 - a2*a3` for the coefficients of the two-channel, two-neighbor
/// weighted sum followed by a per-channel projection, where
/// `a1 = w3 w1, a2 = w3 w2, a3 = w4 w1, a4 = w4 w2`.
pub fn coeff_constraint_residual(w1: f64, w2: f64, w3: f64, w4: f64) -> f64 {
    let (a1, a2, a3, a4) = (w3 * w1, w3 * w2, w4 * w1, w4 * w2);
    a1 * a4 - a2 * a3
}

/// Residual of the same constraint for independently drawn coefficients.
pub fn general_coeff_residual(a1: f64, a2: f64, a3: f64, a4: f64) -> f64 {
    a1 * a4 - a2 * a3
}

/// Fraction of `draws` independent uniform(-1, 1) coefficient sets whose
/// residual exceeds `threshold` in magnitude.
pub fn general_violation_fraction(rng: &mut impl Rng, draws: usize, threshold: f64) -> f64 {
    let mut hits = 0usize;
    for _ in 0..draws {
        let a: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if general_coeff_residual(a[0], a[1], a[2], a[3]).abs() > threshold {
            hits += 1;
        }
    }
    hits as f64 / draws.max(1) as f64
}
