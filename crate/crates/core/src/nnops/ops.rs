//! Differentiable dense primitives recorded on a [`GradTape`].
//!
//! Tensors are treated as `[rows, cols]` matrices with `cols` the trailing
//! axis; leading axes are flattened.

use std::sync::Arc;

use super::tape::{BackwardCtx, GradTape, Op, RunningUpdate, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Max,
}

/// Batch-norm statistics source.
pub enum BnMode<'a> {
    /// Normalize with batch statistics and record a running-stat update
    /// under `prefix`.
    Train { prefix: &'a str },
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// `c[m,n] = beta * c + a[m,k] * b[k,n]`, with optional transposes of the
/// row-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn column_sums(t: &Tensor) -> Vec<f64> {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for row in t.data().chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

fn check_same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Size(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// linear

struct LinearOp;

impl Op for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        let rows = x.numel() / cin;
        let dy = ctx.grad.data();
        let mut out = Vec::with_capacity(ctx.inputs.len());
        out.push(ctx.needs[0].then(|| {
            let mut dx = vec![0.0; rows * cin];
            gemm(rows, cout, cin, dy, false, w.data(), true, 0.0, &mut dx);
            Tensor::new(x.shape().to_vec(), dx).expect("shape")
        }));
        out.push(ctx.needs[1].then(|| {
            let mut dw = vec![0.0; cin * cout];
            gemm(cin, rows, cout, x.data(), true, dy, false, 0.0, &mut dw);
            Tensor::new(vec![cin, cout], dw).expect("shape")
        }));
        if ctx.inputs.len() == 3 {
            out.push(ctx.needs[2].then(|| {
                Tensor::new(vec![cout], column_sums(ctx.grad)).expect("shape")
            }));
        }
        Ok(out)
    }
}

struct BatchNormOp {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl Op for BatchNormOp {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let gamma = ctx.inputs[1].data();
        let c = gamma.len();
        let rows = ctx.grad.numel() / c;
        let dy = ctx.grad.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (dyr, xr) in dy.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
            for j in 0..c {
                dgamma[j] += dyr[j] * xr[j];
                dbeta[j] += dyr[j];
            }
        }
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0; rows * c];
            if self.batch_stats {
                // dxhat = dy * gamma; sums of dxhat and dxhat * xhat are
                // gamma * dbeta and gamma * dgamma
                let n = rows as f64;
                for ((dxr, dyr), xr) in dx
                    .chunks_exact_mut(c)
                    .zip(dy.chunks_exact(c))
                    .zip(self.xhat.chunks_exact(c))
                {
                    for j in 0..c {
                        let g = gamma[j];
                        dxr[j] = self.inv_std[j] / n
                            * (n * dyr[j] * g - g * dbeta[j] - xr[j] * g * dgamma[j]);
                    }
                }
            } else {
                for (dxr, dyr) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)) {
                    for j in 0..c {
                        dxr[j] = dyr[j] * gamma[j] * self.inv_std[j];
                    }
                }
            }
            Tensor::new(ctx.inputs[0].shape().to_vec(), dx).expect("shape")
        });
        Ok(vec![
            dx,
            Some(Tensor::new(vec![c], dgamma).expect("shape")),
            Some(Tensor::new(vec![c], dbeta).expect("shape")),
        ])
    }
}

struct ActivationOp(Activation);

impl Op for ActivationOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Activation::Relu => "relu",
            Activation::LeakyRelu(_) => "leaky_relu",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0].data();
        let dy = ctx.grad.data();
        let dx = x
            .iter()
            .zip(dy)
            .map(|(&x, &g)| match self.0 {
                Activation::Relu => {
                    if x > 0.0 {
                        g
                    } else {
                        0.0
                    }
                }
                Activation::LeakyRelu(slope) => {
                    if x < 0.0 {
                        slope * g
                    } else {
                        g
                    }
                }
            })
            .collect();
        Ok(vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), dx)?)])
    }
}

struct AddOp;

impl Op for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])
    }
}

struct ResidualFuseOp;

impl Op for ResidualFuseOp {
    fn name(&self) -> &'static str {
        "residual_fuse"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g: Vec<f64> = ctx
            .output
            .data()
            .iter()
            .zip(ctx.grad.data())
            .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
            .collect();
        let g = Tensor::new(ctx.output.shape().to_vec(), g)?;
        Ok(vec![Some(g.clone()), Some(g)])
    }
}

struct MulOp;

impl Op for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let da = ctx.needs[0].then(|| {
            let d = ctx.grad.data().iter().zip(b.data()).map(|(g, b)| g * b).collect();
            Tensor::new(a.shape().to_vec(), d).expect("shape")
        });
        let db = ctx.needs[1].then(|| {
            let d = ctx.grad.data().iter().zip(a.data()).map(|(g, a)| g * a).collect();
            Tensor::new(b.shape().to_vec(), d).expect("shape")
        });
        Ok(vec![da, db])
    }
}

struct ScaleOp(f64);

impl Op for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(ctx.grad.map(|g| g * self.0))])
    }
}

struct SumOp;

impl Op for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = ctx.grad.data()[0];
        Ok(vec![Some(Tensor::filled(ctx.inputs[0].shape(), g))])
    }
}

struct ReshapeOp;

impl Op for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(
            ctx.grad.clone().reshape(ctx.inputs[0].shape().to_vec())?,
        )])
    }
}

struct ConcatColsOp {
    left: usize,
    right: usize,
}

impl Op for ConcatColsOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let width = self.left + self.right;
        let mut a = Vec::with_capacity(ctx.inputs[0].numel());
        let mut b = Vec::with_capacity(ctx.inputs[1].numel());
        for row in ctx.grad.data().chunks_exact(width) {
            a.extend_from_slice(&row[..self.left]);
            b.extend_from_slice(&row[self.left..]);
        }
        Ok(vec![
            Some(Tensor::new(ctx.inputs[0].shape().to_vec(), a)?),
            Some(Tensor::new(ctx.inputs[1].shape().to_vec(), b)?),
        ])
    }
}

struct GatherRowsOp {
    idx: Arc<[usize]>,
}

impl Op for GatherRowsOp {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let c = x.cols();
        let mut dx = vec![0.0; x.numel()];
        for (&i, g) in self.idx.iter().zip(ctx.grad.data().chunks_exact(c)) {
            for (d, g) in dx[i * c..(i + 1) * c].iter_mut().zip(g) {
                *d += g;
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx)?)])
    }
}

struct GroupRelativeOp {
    nbr: Arc<[usize]>,
    centers: Arc<[usize]>,
    k: usize,
}

impl Op for GroupRelativeOp {
    fn name(&self) -> &'static str {
        "group_relative"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let c = x.cols();
        let mut dx = vec![0.0; x.numel()];
        for (row, g) in ctx.grad.data().chunks_exact(c).enumerate() {
            let (j, i) = (self.nbr[row], self.centers[row / self.k]);
            for (t, gv) in g.iter().enumerate() {
                dx[j * c + t] += gv;
                dx[i * c + t] -= gv;
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx)?)])
    }
}

struct NeighborReduceOp {
    k: usize,
    mode: Reduction,
    pad: Option<Arc<[bool]>>,
    /// Winning row per output entry (max mode only).
    argmax: Vec<usize>,
}

impl Op for NeighborReduceOp {
    fn name(&self) -> &'static str {
        match self.mode {
            Reduction::Sum => "neighbor_reduce_sum",
            Reduction::Max => "neighbor_reduce_max",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let d = x.cols();
        let mut dx = vec![0.0; x.numel()];
        let dy = ctx.grad.data();
        match self.mode {
            Reduction::Sum => {
                for (row, dxr) in dx.chunks_exact_mut(d).enumerate() {
                    if self.pad.as_ref().is_some_and(|p| p[row]) {
                        continue;
                    }
                    let g = row / self.k;
                    dxr.copy_from_slice(&dy[g * d..(g + 1) * d]);
                }
            }
            Reduction::Max => {
                for (o, &row) in self.argmax.iter().enumerate() {
                    dx[row * d + o % d] += dy[o];
                }
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx)?)])
    }
}

struct GroupedProjectionOp {
    m: usize,
}

impl Op for GroupedProjectionOp {
    fn name(&self) -> &'static str {
        "grouped_projection"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let m = self.m;
        let c = w.shape()[0];
        let dy = ctx.grad.data();
        let mut dx = vec![0.0; x.numel()];
        let mut dw = vec![0.0; w.numel()];
        for ((xr, dxr), dyr) in x
            .data()
            .chunks_exact(c * m)
            .zip(dx.chunks_exact_mut(c * m))
            .zip(dy.chunks_exact(c))
        {
            for ch in 0..c {
                let g = dyr[ch];
                for d in 0..m {
                    dxr[ch * m + d] = g * w.data()[ch * m + d];
                    dw[ch * m + d] += g * xr[ch * m + d];
                }
            }
        }
        let mut out = vec![
            Some(Tensor::new(x.shape().to_vec(), dx)?),
            Some(Tensor::new(w.shape().to_vec(), dw)?),
        ];
        if ctx.inputs.len() == 3 {
            out.push(Some(Tensor::new(vec![c], column_sums(ctx.grad))?));
        }
        Ok(out)
    }
}

struct MaskRowsOp {
    mask: Arc<[bool]>,
}

impl Op for MaskRowsOp {
    fn name(&self) -> &'static str {
        "mask_rows"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let c = ctx.grad.cols();
        let mut g = ctx.grad.clone();
        for (row, masked) in g.data_mut().chunks_exact_mut(c).zip(self.mask.iter()) {
            if *masked {
                row.fill(0.0);
            }
        }
        Ok(vec![Some(g.reshape(ctx.inputs[0].shape().to_vec())?)])
    }
}

struct InterpolateRowsOp {
    idx: Arc<[usize]>,
    weights: Arc<[f64]>,
    per_row: usize,
}

impl Op for InterpolateRowsOp {
    fn name(&self) -> &'static str {
        "interpolate_rows"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let c = x.cols();
        let mut dx = vec![0.0; x.numel()];
        for (r, g) in ctx.grad.data().chunks_exact(c).enumerate() {
            for s in 0..self.per_row {
                let (i, w) = (self.idx[r * self.per_row + s], self.weights[r * self.per_row + s]);
                for (d, gv) in dx[i * c..(i + 1) * c].iter_mut().zip(g) {
                    *d += w * gv;
                }
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx)?)])
    }
}

impl GradTape {
    /// `y = x W + b` with `W: [cin, cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if wt.shape().len() != 2 {
            return Err(Error::Size(format!("linear weight must be 2-D, got {:?}", wt.shape())));
        }
        let (cin, cout) = (wt.shape()[0], wt.shape()[1]);
        if xt.cols() != cin {
            return Err(Error::Size(format!(
                "linear expects {cin} input channels, got {}",
                xt.cols()
            )));
        }
        let rows = xt.numel() / cin;
        let mut y = vec![0.0; rows * cout];
        let mut beta = 0.0;
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.numel() != cout {
                return Err(Error::Size(format!(
                    "linear bias has {} entries, expected {cout}",
                    bt.numel()
                )));
            }
            for row in y.chunks_exact_mut(cout) {
                row.copy_from_slice(bt.data());
            }
            beta = 1.0;
        }
        gemm(rows, cin, cout, xt.data(), false, wt.data(), false, beta, &mut y);
        let out = Tensor::new(with_last(xt.shape(), cout), y)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.record(Box::new(LinearOp), &inputs, out)
    }

    /// Per-channel normalization over all leading axes followed by `gamma, beta`.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.cols();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != c || b.len() != c {
            return Err(Error::Size(format!(
                "batchnorm over {c} channels given {} / {} affine entries",
                g.len(),
                b.len()
            )));
        }
        let rows = xt.rows();
        let (mean, inv_std, update): (Vec<f64>, Vec<f64>, Option<RunningUpdate>) = match mode {
            BnMode::Train { prefix } => {
                if rows < 2 {
                    return Err(Error::DegenerateStatistics(format!(
                        "batchnorm `{prefix}` in train mode needs at least 2 samples per channel, got {rows}"
                    )));
                }
                let mean: Vec<f64> = column_sums(xt).iter().map(|s| s / rows as f64).collect();
                let mut var = vec![0.0; c];
                for row in xt.data().chunks_exact(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                let inv_std = var
                    .iter()
                    .map(|v| 1.0 / (v / rows as f64 + BN_EPS).sqrt())
                    .collect();
                let unbiased = var.iter().map(|v| v / (rows - 1) as f64).collect();
                let update = RunningUpdate {
                    prefix: prefix.to_string(),
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, inv_std, Some(update))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Size("running statistics width mismatch".into()));
                }
                let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean.to_vec(), inv_std, None)
            }
        };
        let mut xhat = vec![0.0; xt.numel()];
        let mut y = vec![0.0; xt.numel()];
        for ((xr, hr), yr) in xt
            .data()
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(y.chunks_exact_mut(c))
        {
            for j in 0..c {
                hr[j] = (xr[j] - mean[j]) * inv_std[j];
                yr[j] = g[j] * hr[j] + b[j];
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), y)?;
        let batch_stats = update.is_some();
        if let Some(u) = update {
            self.record_running(u);
        }
        let op = BatchNormOp {
            xhat,
            inv_std,
            batch_stats,
        };
        self.record(Box::new(op), &[x, gamma, beta], out)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = self.value(x).map(|v| match kind {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(slope) => {
                if v < 0.0 {
                    slope * v
                } else {
                    v
                }
            }
        });
        self.record(Box::new(ActivationOp(kind)), &[x], out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        check_same_shape("add", at, bt)?;
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(at.shape().to_vec(), data)?;
        self.record(Box::new(AddOp), &[a, b], out)
    }

    /// `relu(main + skip)`.
    pub fn residual_fuse(&mut self, main: Var, skip: Var) -> Result<Var> {
        let (at, bt) = (self.value(main), self.value(skip));
        check_same_shape("residual_fuse", at, bt)?;
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(x, y)| (x + y).max(0.0))
            .collect();
        let out = Tensor::new(at.shape().to_vec(), data)?;
        self.record(Box::new(ResidualFuseOp), &[main, skip], out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        check_same_shape("mul", at, bt)?;
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(at.shape().to_vec(), data)?;
        self.record(Box::new(MulOp), &[a, b], out)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.record(Box::new(ScaleOp(s)), &[x], out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(Box::new(SumOp), &[x], out)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.record(Box::new(ReshapeOp), &[x], out)
    }

    /// Column-wise concatenation of two `[rows, *]` tensors.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rows() != bt.rows() {
            return Err(Error::Size(format!(
                "concat: {} rows vs {} rows",
                at.rows(),
                bt.rows()
            )));
        }
        let (left, right) = (at.cols(), bt.cols());
        let mut data = Vec::with_capacity(at.numel() + bt.numel());
        for (ra, rb) in at.data().chunks_exact(left).zip(bt.data().chunks_exact(right)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let out = Tensor::new(vec![at.rows(), left + right], data)?;
        self.record(Box::new(ConcatColsOp { left, right }), &[a, b], out)
    }

    /// Selects rows `idx` of a `[rows, cols]` tensor.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.cols();
        let rows = xt.rows();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= rows {
                return Err(Error::Size(format!("row index {i} out of range {rows}")));
            }
            data.extend_from_slice(xt.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        self.record(Box::new(GatherRowsOp { idx }), &[x], out)
    }

    /// `out[g*k + s] = x[nbr[g*k + s]] - x[centers[g]]`.
    pub fn group_relative(
        &mut self,
        x: Var,
        nbr: Arc<[usize]>,
        centers: Arc<[usize]>,
        k: usize,
    ) -> Result<Var> {
        let xt = self.value(x);
        let (rows, c) = (xt.rows(), xt.cols());
        if k == 0 || nbr.len() != centers.len() * k {
            return Err(Error::Size(format!(
                "group_relative: {} neighbor rows for {} centers with k={k}",
                nbr.len(),
                centers.len()
            )));
        }
        if nbr.iter().chain(centers.iter()).any(|&i| i >= rows) {
            return Err(Error::Size("group_relative: index out of range".into()));
        }
        let mut data = Vec::with_capacity(nbr.len() * c);
        for (row, &j) in nbr.iter().enumerate() {
            let i = centers[row / k];
            let (fj, fi) = (xt.row(j), xt.row(i));
            data.extend(fj.iter().zip(fi).map(|(a, b)| a - b));
        }
        let out = Tensor::new(vec![nbr.len(), c], data)?;
        self.record(Box::new(GroupRelativeOp { nbr, centers, k }), &[x], out)
    }

    /// Reduces consecutive blocks of `k` rows. Padded rows are skipped.
    pub fn neighbor_reduce(
        &mut self,
        x: Var,
        k: usize,
        mode: Reduction,
        pad: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        let xt = self.value(x);
        let (rows, d) = (xt.rows(), xt.cols());
        if k == 0 || rows % k != 0 {
            return Err(Error::Size(format!("neighbor_reduce: {rows} rows not divisible by k={k}")));
        }
        if let Some(p) = &pad {
            if p.len() != rows {
                return Err(Error::Size("neighbor_reduce: pad mask length mismatch".into()));
            }
        }
        let groups = rows / k;
        let mut out = vec![0.0; groups * d];
        let mut argmax = Vec::new();
        if mode == Reduction::Max {
            argmax = vec![usize::MAX; groups * d];
            out.fill(f64::NEG_INFINITY);
        }
        for g in 0..groups {
            let mut seen = false;
            for s in 0..k {
                let row = g * k + s;
                if pad.as_ref().is_some_and(|p| p[row]) {
                    continue;
                }
                seen = true;
                let xr = xt.row(row);
                let or = &mut out[g * d..(g + 1) * d];
                match mode {
                    Reduction::Sum => {
                        for (o, v) in or.iter_mut().zip(xr) {
                            *o += v;
                        }
                    }
                    Reduction::Max => {
                        for (t, (o, v)) in or.iter_mut().zip(xr).enumerate() {
                            if *v > *o || argmax[g * d + t] == usize::MAX {
                                *o = *v;
                                argmax[g * d + t] = row;
                            }
                        }
                    }
                }
            }
            if !seen {
                return Err(Error::InvalidNeighborhood(format!(
                    "group {g} has every neighbor padded"
                )));
            }
        }
        let out = Tensor::new(vec![groups, d], out)?;
        self.record(
            Box::new(NeighborReduceOp {
                k,
                mode,
                pad,
                argmax,
            }),
            &[x],
            out,
        )
    }

    /// Channel-independent projection of `[rows, c*m]` vectors to `[rows, c]`
    /// scalars with weight `[c, m]`.
    pub fn grouped_projection(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if wt.shape().len() != 2 {
            return Err(Error::Size("grouped_projection weight must be [c, m]".into()));
        }
        let (c, m) = (wt.shape()[0], wt.shape()[1]);
        if xt.cols() != c * m {
            return Err(Error::Size(format!(
                "grouped_projection expects {c} channels of dimension {m}, got width {}",
                xt.cols()
            )));
        }
        let bias = match b {
            Some(b) => {
                let bt = self.value(b);
                if bt.numel() != c {
                    return Err(Error::Size("grouped_projection bias width mismatch".into()));
                }
                bt.data().to_vec()
            }
            None => vec![0.0; c],
        };
        let mut out = Vec::with_capacity(xt.rows() * c);
        for xr in xt.data().chunks_exact(c * m) {
            for ch in 0..c {
                let mut acc = 0.0;
                for d in 0..m {
                    acc += xr[ch * m + d] * wt.data()[ch * m + d];
                }
                out.push(acc + bias[ch]);
            }
        }
        let out = Tensor::new(with_last(xt.shape(), c), out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.record(Box::new(GroupedProjectionOp { m }), &inputs, out)
    }

    /// Zeroes the rows flagged in `mask`.
    pub fn mask_rows(&mut self, x: Var, mask: Arc<[bool]>) -> Result<Var> {
        let mut t = self.value(x).clone();
        let c = t.cols();
        if mask.len() != t.rows() {
            return Err(Error::Size("mask_rows: mask length mismatch".into()));
        }
        for (row, masked) in t.data_mut().chunks_exact_mut(c).zip(mask.iter()) {
            if *masked {
                row.fill(0.0);
            }
        }
        self.record(Box::new(MaskRowsOp { mask }), &[x], t)
    }

    /// `out[r] = sum_s weights[r*per_row + s] * x[idx[r*per_row + s]]`.
    pub fn interpolate_rows(
        &mut self,
        x: Var,
        idx: Arc<[usize]>,
        weights: Arc<[f64]>,
        per_row: usize,
    ) -> Result<Var> {
        let xt = self.value(x);
        let (rows, c) = (xt.rows(), xt.cols());
        if per_row == 0 || idx.len() != weights.len() || !idx.len().is_multiple_of(per_row) {
            return Err(Error::Size("interpolate_rows: index/weight layout mismatch".into()));
        }
        if idx.iter().any(|&i| i >= rows) {
            return Err(Error::Size("interpolate_rows: index out of range".into()));
        }
        let n_out = idx.len() / per_row;
        let mut out = vec![0.0; n_out * c];
        for (r, or) in out.chunks_exact_mut(c).enumerate() {
            for s in 0..per_row {
                let (i, w) = (idx[r * per_row + s], weights[r * per_row + s]);
                for (o, v) in or.iter_mut().zip(xt.row(i)) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::new(vec![n_out, c], out)?;
        self.record(
            Box::new(InterpolateRowsOp {
                idx,
                weights,
                per_row,
            }),
            &[x],
            out,
        )
    }
}
