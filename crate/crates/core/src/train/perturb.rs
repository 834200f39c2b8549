//! Test-time robustness harness.

use serde::{Deserialize, Serialize};

use super::augment::Perturbation;
use super::metrics::Metrics;
use super::trainer::{evaluate, Sample};
use crate::error::Result;
use crate::model::{ForwardOpts, Model};
use crate::nnops::ParamStore;

/// Metrics under one perturbation and their change from the clean run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub label: String,
    pub perturbation: Perturbation,
    pub loss: f64,
    pub metrics: Metrics,
    pub delta_oa: f64,
    pub delta_miou: f64,
}

/// Evaluates `store` on `samples` under each perturbation in `specs`. With
/// `rescale_radius`, a scaling by `f` also multiplies every query radius by
/// `f` and divides the position inputs by `f`.
pub fn perturbation_eval(
    model: &Model,
    store: &ParamStore,
    samples: &[Sample],
    specs: &[Perturbation],
    rescale_radius: bool,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<PerturbationRow>> {
    let run = |p: &Perturbation| {
        let mut opts = ForwardOpts::eval();
        if let (true, Perturbation::Scale { factor }) = (rescale_radius, p) {
            opts.position_scale = *factor;
        }
        evaluate(model, store, samples, batch_size, 0.0, opts, p, seed)
    };
    let clean = run(&Perturbation::None)?;
    specs
        .iter()
        .map(|p| {
            let ev = if *p == Perturbation::None { clean.clone() } else { run(p)? };
            Ok(PerturbationRow {
                label: p.label(),
                perturbation: *p,
                loss: ev.loss,
                metrics: ev.metrics,
                delta_oa: ev.metrics.oa - clean.metrics.oa,
                delta_miou: ev.metrics.miou - clean.metrics.miou,
            })
        })
        .collect()
}
