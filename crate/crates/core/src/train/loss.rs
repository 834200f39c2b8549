//! Cross-entropy with label smoothing.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nnops::{BackwardCtx, GradTape, Op, Tensor, Var};

struct SmoothedCrossEntropyOp {
    /// Row-wise softmax of the logits.
    probs: Vec<f64>,
    labels: Arc<[usize]>,
    eps: f64,
}

impl Op for SmoothedCrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let logits = ctx.inputs[0];
        let (s, k) = (logits.rows(), logits.cols());
        let g = ctx.grad.data()[0] / s as f64;
        let mut dx = vec![0.0; s * k];
        for (r, (row, &y)) in dx.chunks_exact_mut(k).zip(self.labels.iter()).enumerate() {
            for (j, d) in row.iter_mut().enumerate() {
                let q = self.eps / k as f64 + if j == y { 1.0 - self.eps } else { 0.0 };
                *d = g * (self.probs[r * k + j] - q);
            }
        }
        Ok(vec![Some(Tensor::new(logits.shape().to_vec(), dx)?)])
    }
}

/// Mean over rows of `-sum_k q_k log softmax_k(logits)` with
/// `q = (1 - eps) onehot(label) + eps / K`.
pub fn ce_label_smoothing(logits: &Tensor, labels: &[usize], eps: f64) -> Result<f64> {
    let (loss, _) = smoothed_ce(logits, labels, eps)?;
    Ok(loss)
}

fn smoothed_ce(logits: &Tensor, labels: &[usize], eps: f64) -> Result<(f64, Vec<f64>)> {
    let (s, k) = (logits.rows(), logits.cols());
    if labels.len() != s {
        return Err(Error::Size(format!("{} labels for {s} rows", labels.len())));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing must be in [0, 1), got {eps}")));
    }
    if s == 0 {
        return Err(Error::Data("cross entropy over zero samples".into()));
    }
    let mut probs = vec![0.0; s * k];
    let mut total = 0.0;
    for (r, (row, &y)) in logits.data().chunks_exact(k).zip(labels).enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let mut acc = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let logp = v - lse;
            probs[r * k + j] = logp.exp();
            let q = eps / k as f64 + if j == y { 1.0 - eps } else { 0.0 };
            acc -= q * logp;
        }
        total += acc;
    }
    Ok((total / s as f64, probs))
}

impl GradTape {
    /// Smoothed cross entropy of `[S, K]` logits against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>, eps: f64) -> Result<Var> {
        let (loss, probs) = smoothed_ce(self.value(logits), &labels, eps)?;
        let op = SmoothedCrossEntropyOp { probs, labels, eps };
        self.record(Box::new(op), &[logits], Tensor::scalar(loss))
    }
}
