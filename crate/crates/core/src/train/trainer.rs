//! Epoch loop, evaluation and run-directory artifacts.

use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig, Perturbation};
use super::metrics::{Confusion, Metrics};
use super::optim::{cosine_lr, AdamW};
use crate::error::{Error, Result};
use crate::geometry::PointSetBatch;
use crate::model::{param_count, save_checkpoint, Checkpoint, ForwardOpts, Model, ModelConfig, Task};
use crate::nnops::{GradTape, ParamStore};

pub const CSV_HEADER: &str = "epoch,split,loss,lr,oa,macc,miou,wall_ms";

/// Arithmetic used for the stored parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub precision: Precision,
    /// Write measured epoch times into the metrics CSV. Off by default so
    /// that seed-fixed runs produce identical files.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.002,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 8,
            label_smoothing: 0.1,
            seed: 0,
            augment: AugmentConfig::default(),
            precision: Precision::Double,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be a finite non-negative rate, got {}", self.lr0)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.augment.validate()
    }
}

/// One cloud. `class` is the target for classification; segmentation
/// reads per-point labels from the cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cloud: PointSetBatch,
    pub class: Option<usize>,
}

impl Sample {
    pub fn segmentation(cloud: PointSetBatch) -> Self {
        Self { cloud, class: None }
    }

    pub fn classification(cloud: PointSetBatch, class: usize) -> Self {
        Self {
            cloud,
            class: Some(class),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub lr: f64,
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
    /// The value written to the CSV.
    pub wall_ms: u64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.split, self.loss, self.lr, self.oa, self.macc, self.miou, self.wall_ms
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<EpochRecord>,
    /// Confusion matrix of the last epoch on the selection split.
    pub confusion: Confusion,
    pub best_epoch: usize,
    /// mIoU for segmentation, OA for classification.
    pub best_score: f64,
    pub param_count: usize,
    /// Measured time per epoch, kept out of the CSV unless requested.
    pub epoch_ms: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn last(&self, split: Split) -> Option<&EpochRecord> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub confusion: Confusion,
    pub metrics: Metrics,
}

/// Index groups of at most `size`, a trailing singleton folded into the
/// group before it so that batch statistics never see one cloud alone.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() == 1) {
        let n = out.len();
        let start = order.len() - out[n - 2].len() - 1;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}

/// Stacks samples into one batch with its flat target list.
fn assemble(task: Task, samples: &[&Sample], clouds: Vec<PointSetBatch>) -> Result<(PointSetBatch, Vec<usize>)> {
    let refs: Vec<&PointSetBatch> = clouds.iter().collect();
    let batch = PointSetBatch::concat(&refs)?;
    let targets = match task {
        Task::Segmentation => batch
            .labels()
            .ok_or_else(|| Error::Data("segmentation sample without point labels".into()))?
            .to_vec(),
        Task::Classification => samples
            .iter()
            .map(|s| {
                s.class
                    .ok_or_else(|| Error::Data("classification sample without a class".into()))
            })
            .collect::<Result<_>>()?,
    };
    Ok((batch, targets))
}

fn check_samples(cfg: &ModelConfig, samples: &[Sample], what: &str) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.cloud.batch() != 1 {
            return Err(Error::Data(format!("{what} sample {i} holds {} clouds", s.cloud.batch())));
        }
        let bad = match cfg.task {
            Task::Segmentation => s.cloud.labels().is_none_or(|l| l.iter().any(|&y| y >= cfg.num_classes)),
            Task::Classification => s.class.is_none_or(|y| y >= cfg.num_classes),
        };
        if bad {
            return Err(Error::Data(format!(
                "{what} sample {i} lacks labels or has one outside {} classes",
                cfg.num_classes
            )));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
/// Loss and confusion of `store` on `samples` after applying `perturbation`.
/// Jitter draws from a generator seeded with `seed`.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    samples: &[Sample],
    batch_size: usize,
    label_smoothing: f64,
    opts: ForwardOpts,
    perturbation: &Perturbation,
    seed: u64,
) -> Result<Evaluation> {
    let cfg = model.config();
    check_samples(cfg, samples, "evaluation")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut confusion = Confusion::new(cfg.num_classes);
    let (mut loss_sum, mut rows) = (0.0, 0usize);
    let order: Vec<usize> = (0..samples.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let picked: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
        let clouds = picked
            .iter()
            .map(|s| augment(&s.cloud, perturbation, &mut rng))
            .collect::<Result<_>>()?;
        let (batch, targets) = assemble(cfg.task, &picked, clouds)?;
        let mut tape = GradTape::new();
        let out = model.forward(&mut tape, store, &batch, opts)?;
        let loss = tape.cross_entropy(out, Arc::from(targets.clone()), label_smoothing)?;
        loss_sum += tape.value(loss).data()[0] * targets.len() as f64;
        rows += targets.len();
        confusion.add_logits(tape.value(out).data(), &targets)?;
    }
    let metrics = confusion.metrics()?;
    Ok(Evaluation {
        loss: loss_sum / rows as f64,
        confusion,
        metrics,
    })
}

struct Artifacts {
    dir: PathBuf,
    csv: File,
    log: File,
}

impl Artifacts {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map_err(|e| Error::io(p, e))
        };
        let mut csv = open("metrics.csv")?;
        let log = open("log.txt")?;
        writeln!(csv, "{CSV_HEADER}").map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            csv,
            log,
        })
    }

    fn row(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.csv, "{}", r.csv_row()).map_err(|e| Error::io(self.dir.join("metrics.csv"), e))
    }

    fn log(&mut self, line: &str) -> Result<()> {
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.dir.join("log.txt"), e))
    }
}

fn note(artifacts: &mut Option<Artifacts>, line: &str) -> Result<()> {
    match artifacts {
        Some(a) => a.log(line),
        None => Ok(()),
    }
}

/// Trains from a fresh seeded initialization, evaluating every epoch. With a
/// run directory, writes `metrics.csv`, `log.txt` and `best.ckpt` there.
pub fn train_loop(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    let model = Model::new(model_cfg.clone())?;
    if dataset.train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    check_samples(model_cfg, &dataset.train, "training")?;
    check_samples(model_cfg, &dataset.val, "validation")?;
    if model_cfg.task == Task::Classification && dataset.train.len() < 2 {
        return Err(Error::Data("classification training needs at least two clouds".into()));
    }
    let mut artifacts = run_dir.map(Artifacts::create).transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut store = model.init(&mut rng);
    if train_cfg.precision == Precision::Single {
        store.round_to_single();
    }
    let mut opt = AdamW::new(train_cfg.weight_decay);
    let params = param_count(&store);
    note(
        &mut artifacts,
        &format!(
            "model {} parameters, {} train / {} val samples",
            params,
            dataset.train.len(),
            dataset.val.len()
        ),
    )?;

    let select = |m: &Metrics| match model_cfg.task {
        Task::Segmentation => m.miou,
        Task::Classification => m.oa,
    };
    let mut rows = Vec::new();
    let mut epoch_ms = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut last_confusion = Confusion::new(model_cfg.num_classes);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    for epoch in 0..train_cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, train_cfg.epochs, train_cfg.lr0);
        order.shuffle(&mut rng);
        let mut confusion = Confusion::new(model_cfg.num_classes);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (step, chunk) in batches(&order, train_cfg.batch_size).into_iter().enumerate() {
            let picked: Vec<&Sample> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let clouds = picked
                .iter()
                .map(|s| train_cfg.augment.apply(&s.cloud, &mut rng))
                .collect::<Result<_>>()?;
            let (batch, targets) = assemble(model_cfg.task, &picked, clouds)?;
            let result = (|| {
                let mut tape = GradTape::new();
                let out = model.forward(&mut tape, &store, &batch, ForwardOpts::train())?;
                let loss = tape.cross_entropy(out, Arc::from(targets.clone()), train_cfg.label_smoothing)?;
                let value = tape.value(loss).data()[0];
                confusion.add_logits(tape.value(out).data(), &targets)?;
                let updates = tape.running_updates().to_vec();
                let grads = tape.backward(loss)?.into_param_grads();
                store.apply_running_updates(&updates)?;
                opt.step(&mut store, &grads, lr)?;
                if train_cfg.precision == Precision::Single {
                    store.round_to_single();
                }
                Ok(value)
            })();
            let value = match result {
                Ok(v) => v,
                Err(Error::NumericFault { layer, detail }) => {
                    let detail = format!("{detail} (training diverged at epoch {epoch}, step {step})");
                    note(&mut artifacts, &format!("abort: numeric fault in {layer}: {detail}"))?;
                    return Err(Error::NumericFault { layer, detail });
                }
                Err(e) => return Err(e),
            };
            loss_sum += value * targets.len() as f64;
            count += targets.len();
        }
        let train_metrics = confusion.metrics()?;
        let mut split_rows = vec![(Split::Train, loss_sum / count as f64, train_metrics)];
        let mut selection = (train_metrics, confusion);
        if !dataset.val.is_empty() {
            let ev = evaluate(
                &model,
                &store,
                &dataset.val,
                train_cfg.batch_size,
                train_cfg.label_smoothing,
                ForwardOpts::eval(),
                &Perturbation::None,
                train_cfg.seed,
            )?;
            split_rows.push((Split::Val, ev.loss, ev.metrics));
            selection = (ev.metrics, ev.confusion);
        }
        let ms = started.elapsed().as_secs_f64() * 1e3;
        epoch_ms.push(ms);
        for (split, loss, m) in split_rows {
            let rec = EpochRecord {
                epoch,
                split,
                loss,
                lr,
                oa: m.oa,
                macc: m.macc,
                miou: m.miou,
                wall_ms: if train_cfg.record_wall_time { ms.round() as u64 } else { 0 },
            };
            if let Some(a) = &mut artifacts {
                a.row(&rec)?;
                a.log(&format!(
                    "epoch {epoch} {split}: loss {:.5} lr {:.6} oa {:.4} macc {:.4} miou {:.4} ({ms:.0} ms)",
                    rec.loss, rec.lr, rec.oa, rec.macc, rec.miou
                ))?;
            }
            rows.push(rec);
        }
        let score = select(&selection.0);
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((epoch, score, store.clone()));
            if let Some(a) = &artifacts {
                save_checkpoint(
                    a.dir.join("best.ckpt"),
                    &Checkpoint {
                        config: model_cfg.clone(),
                        store: store.clone(),
                    },
                )?;
            }
        }
        last_confusion = selection.1;
    }

    let (best_epoch, best_score, best_store) = best.expect("at least one epoch");
    note(&mut artifacts, &format!("best epoch {best_epoch} score {best_score:.4}"))?;
    Ok(TrainOutcome {
        report: TrainReport {
            rows,
            confusion: last_confusion,
            best_epoch,
            best_score,
            param_count: params,
            epoch_ms,
        },
        best: Checkpoint {
            config: model_cfg.clone(),
            store: best_store,
        },
        last: Checkpoint {
            config: model_cfg.clone(),
            store,
        },
    })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    #[test]
    fn trailing_singleton_joins_previous_batch() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b, vec![&order[0..4], &order[4..9]]);
        assert_eq!(batches(&order[..1], 4), vec![&order[..1]]);
        assert_eq!(batches(&order[..8], 4).len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr0: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            label_smoothing: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1}"#).is_err());
    }

    #[test]
    fn csv_rows_follow_header() {
        let r = EpochRecord {
            epoch: 2,
            split: Split::Val,
            loss: 0.5,
            lr: 0.001,
            oa: 1.0,
            macc: 0.75,
            miou: 0.5,
            wall_ms: 0,
        };
        assert_eq!(r.csv_row(), "2,val,0.5,0.001,1,0.75,0.5,0");
        assert_eq!(CSV_HEADER.split(',').count(), r.csv_row().split(',').count());
    }

    #[test]
    fn missing_labels_are_data_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cloud = PointSetBatch::from_positions(1, 10, pos, None).unwrap();
        let cfg = ModelConfig::toy(Task::Segmentation, 2);
        let data = Dataset {
            train: vec![Sample::segmentation(cloud)],
            val: vec![],
        };
        let err = train_loop(&cfg, &TrainConfig::default(), &data, None).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
