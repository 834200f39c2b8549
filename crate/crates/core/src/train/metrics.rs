//! Confusion matrices and the OA / mAcc / mIoU summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[truth * k + predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub k: usize,
    pub counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Size("confusion matrix must be square".into()));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.k || predicted >= self.k {
            return Err(Error::Data(format!(
                "class pair ({truth}, {predicted}) outside {} classes",
                self.k
            )));
        }
        self.counts[truth * self.k + predicted] += 1;
        Ok(())
    }

    /// Adds the argmax of each `k`-wide logit row against its label.
    pub fn add_logits(&mut self, logits: &[f64], labels: &[usize]) -> Result<()> {
        if logits.len() != labels.len() * self.k {
            return Err(Error::Size("logit rows differ from label count".into()));
        }
        for (row, &y) in logits.chunks_exact(self.k).zip(labels) {
            self.add(y, argmax(row))?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Size("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn metrics(&self) -> Result<Metrics> {
        metrics(self)
    }
}

/// Index of the largest entry, first on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Overall accuracy, mean per-class recall and mean IoU. Recall averages
/// over classes present in the ground truth; IoU over classes present in
/// the ground truth or the predictions.
pub fn metrics(c: &Confusion) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let k = c.k;
    let trace: u64 = (0..k).map(|i| c.get(i, i)).sum();
    let (mut acc_sum, mut acc_n, mut iou_sum, mut iou_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..k {
        let tp = c.get(i, i);
        let gt: u64 = (0..k).map(|j| c.get(i, j)).sum();
        let pred: u64 = (0..k).map(|j| c.get(j, i)).sum();
        if gt > 0 {
            acc_sum += tp as f64 / gt as f64;
            acc_n += 1;
        }
        let union = gt + pred - tp;
        if union > 0 {
            iou_sum += tp as f64 / union as f64;
            iou_n += 1;
        }
    }
    Ok(Metrics {
        oa: trace as f64 / total as f64,
        macc: acc_sum / acc_n as f64,
        miou: iou_sum / iou_n as f64,
    })
}
