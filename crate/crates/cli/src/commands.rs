//! Subcommand implementations. Each returns the process exit code.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use pointvector::dataio::{
    gen_classification_set, gen_segmentation_scene, scene_seeds, write_manifest, write_points, ClassificationSpec,
    ManifestEntry, SceneSpec,
};
use pointvector::geometry::PointSetBatch;
use pointvector::gradcheck::{corrupted_fixture, registry, run_suite, REL_TOLERANCE};
use pointvector::model::{load_checkpoint, param_count, ForwardOpts, Model, ModelConfig, Task};
use pointvector::nnops::GradTape;
use pointvector::train::{perturbation_eval, robustness_suite, train_loop, Perturbation, Split, TrainReport};
use pointvector::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::{Cli, Command, Global, SplitArg, SuiteArg};

pub fn run(cli: &Cli) -> Result<u8> {
    let g = &cli.global;
    match &cli.command {
        Command::Train { config, out } => train(g, config, out.as_deref()),
        Command::Eval {
            checkpoint,
            config,
            split,
            suite,
            rescale_radius,
            csv,
        } => eval(g, checkpoint, config, *split, *suite, *rescale_radius, csv.as_deref()),
        Command::Ablate { config, out } => ablate(g, config, out.as_deref()),
        Command::Gradcheck {
            instances,
            inject_fault,
        } => gradcheck(g, *instances, *inject_fault),
        Command::Bench {
            config,
            points,
            batch,
            iters,
        } => bench(g, config.as_deref(), *points, *batch, *iters),
        Command::GenData {
            out,
            train,
            val,
            test,
            points,
            primitives,
            noise,
            classification,
        } => gen_data(g, out, [*train, *val, *test], *points, *primitives, *noise, *classification),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn load_config(g: &Global, path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    if let Some(p) = g.precision {
        cfg.train.precision = p.into();
    }
    Ok(cfg)
}

fn default_run_dir(config: &Path) -> PathBuf {
    let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    Path::new("run").join(stem)
}

/// Creates an empty run directory, refusing to replace a non-empty one
/// unless `overwrite` is set.
fn prepare_run_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if occupied {
            if !overwrite {
                return Err(Error::Config(format!(
                    "run directory {} already exists; pass --overwrite to replace it",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

fn summary(report: &TrainReport) -> String {
    let last = report.last(Split::Val).or_else(|| report.last(Split::Train));
    match last {
        Some(r) => format!(
            "final {}: loss {:.4} oa {:.4} macc {:.4} miou {:.4}; best epoch {} score {:.4}",
            r.split, r.loss, r.oa, r.macc, r.miou, report.best_epoch, report.best_score
        ),
        None => "no epochs".into(),
    }
}

fn train(g: &Global, config: &Path, out: Option<&Path>) -> Result<u8> {
    let cfg = load_config(g, config)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| default_run_dir(config));
    prepare_run_dir(&dir, g.overwrite)?;
    write_config(&dir, &cfg)?;
    let data = cfg.dataset()?;
    let outcome = train_loop(&cfg.model, &cfg.train, &data, Some(&dir))?;
    println!(
        "trained {} parameters for {} epochs in {:.1} s",
        outcome.report.param_count,
        cfg.train.epochs,
        outcome.report.epoch_ms.iter().sum::<f64>() / 1e3
    );
    println!("{}", summary(&outcome.report));
    println!("artifacts in {}", dir.display());
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    g: &Global,
    checkpoint: &Path,
    config: &Path,
    split: SplitArg,
    suite: SuiteArg,
    rescale_radius: bool,
    csv: Option<&Path>,
) -> Result<u8> {
    let cfg = load_config(g, config)?;
    let ckpt = load_checkpoint(checkpoint).map_err(|e| match e {
        Error::Io { path, source } => Error::Checkpoint(format!("cannot read {}: {source}", path.display())),
        other => other,
    })?;
    let model = Model::new(ckpt.config.clone()).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
    model.check_store(&ckpt.store)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let samples = cfg.split(split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("no {split} samples to evaluate")));
    }
    let specs = match suite {
        SuiteArg::None => vec![Perturbation::None],
        SuiteArg::Full => robustness_suite(),
    };
    let rows = perturbation_eval(
        &model,
        &ckpt.store,
        &samples,
        &specs,
        rescale_radius,
        cfg.train.batch_size,
        cfg.train.seed,
    )
    .map_err(|e| match e {
        Error::Size(m) => Error::Checkpoint(format!("checkpoint does not fit the data: {m}")),
        Error::Data(m) => Error::Checkpoint(format!("checkpoint does not fit the data: {m}")),
        other => other,
    })?;
    let mut table = String::from("metric");
    for r in &rows {
        table.push(',');
        table.push_str(&r.label);
    }
    table.push('\n');
    for (name, pick) in [
        ("oa", (|r: &pointvector::train::PerturbationRow| r.metrics.oa) as fn(&_) -> f64),
        ("macc", |r| r.metrics.macc),
        ("miou", |r| r.metrics.miou),
        ("delta_miou", |r| r.delta_miou),
    ] {
        table.push_str(name);
        for r in &rows {
            table.push_str(&format!(",{}", pick(r)));
        }
        table.push('\n');
    }
    print!("{table}");
    if let Some(path) = csv {
        fs::write(path, &table).map_err(io_err(path))?;
    }
    Ok(0)
}

struct Cell {
    model: ModelConfig,
    seed: u64,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

fn ablate(g: &Global, config: &Path, out: Option<&Path>) -> Result<u8> {
    let cfg = load_config(g, config)?;
    let base = &cfg.model;
    let aggs = axis(&cfg.ablate.aggregation, base.resolved_aggregation()?);
    let encs = axis(&cfg.ablate.encoder, base.encoder);
    let dims = axis(&cfg.ablate.vector_dim, base.vector_dim);
    let seeds = axis(&cfg.ablate.seeds, cfg.train.seed);
    let mut cells = Vec::new();
    for &a in &aggs {
        for &e in &encs {
            for &m in &dims {
                for &seed in &seeds {
                    let model = ModelConfig {
                        aggregation: Some(a),
                        reduction: None,
                        encoder: e,
                        vector_dim: m,
                        ..base.clone()
                    };
                    Model::new(model.clone())?;
                    cells.push(Cell { model, seed });
                }
            }
        }
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| default_run_dir(config));
    prepare_run_dir(&dir, g.overwrite)?;
    write_config(&dir, &cfg)?;
    let data = cfg.dataset()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(g.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", g.jobs)))?;
    let results: Vec<Result<(TrainReport, usize)>> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| {
                let train = pointvector::train::TrainConfig {
                    seed: c.seed,
                    ..cfg.train.clone()
                };
                let outcome = train_loop(&c.model, &train, &data, None)?;
                let params = param_count(&outcome.last.store);
                Ok((outcome.report, params))
            })
            .collect()
    });
    let mut csv = String::from("aggregation,encoder,m,seed,param_count,loss,oa,macc,miou\n");
    for (c, r) in cells.iter().zip(results) {
        let (report, params) = r?;
        let last = report
            .last(Split::Val)
            .or_else(|| report.last(Split::Train))
            .ok_or_else(|| Error::Data("ablation cell produced no epochs".into()))?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.model.resolved_aggregation()?.as_str(),
            c.model.encoder.as_str(),
            c.model.vector_dim,
            c.seed,
            params,
            last.loss,
            last.oa,
            last.macc,
            last.miou
        ));
    }
    let path = dir.join("ablate.csv");
    fs::write(&path, &csv).map_err(io_err(&path))?;
    print!("{csv}");
    Ok(0)
}

fn gradcheck(g: &Global, instances: usize, inject_fault: bool) -> Result<u8> {
    let mut checks = registry();
    if inject_fault {
        checks.push(corrupted_fixture());
    }
    let reports = run_suite(&checks, instances.max(1), g.seed.unwrap_or(17))?;
    let mut failed = Vec::new();
    println!("{:<28} {:>9} {:>14}  result  ops", "check", "instances", "worst rel err");
    for r in &reports {
        let ops: Vec<&str> = r.ops.iter().copied().collect();
        println!(
            "{:<28} {:>9} {:>14.3e}  {:<6}  {}",
            r.name,
            r.instances,
            r.worst_rel_error,
            if r.passed() { "pass" } else { "FAIL" },
            ops.join(" ")
        );
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks below {REL_TOLERANCE:e}", reports.len());
        Ok(0)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(4)
    }
}

fn bench(g: &Global, config: Option<&Path>, points: usize, batch: usize, iters: usize) -> Result<u8> {
    let model_cfg = match config {
        Some(p) => load_config(g, p)?.model,
        None => ModelConfig::toy(Task::Segmentation, 3),
    };
    let model = Model::new(model_cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed.unwrap_or(0));
    let store = model.init(&mut rng);
    let pos = (0..batch * points * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cloud = PointSetBatch::from_positions(batch, points, pos, None)?;
    let targets: Vec<usize> = match model_cfg.task {
        Task::Segmentation => (0..batch * points).map(|i| i % model_cfg.num_classes).collect(),
        Task::Classification => (0..batch).map(|i| i % model_cfg.num_classes).collect(),
    };
    let targets: Arc<[usize]> = targets.into();
    let (mut fwd, mut bwd) = (Vec::new(), Vec::new());
    for _ in 0..iters.max(1) {
        let t0 = Instant::now();
        let mut tape = GradTape::new();
        let out = model.forward(&mut tape, &store, &cloud, ForwardOpts::train())?;
        let loss = tape.cross_entropy(out, targets.clone(), 0.0)?;
        let t1 = Instant::now();
        tape.backward(loss)?;
        fwd.push((t1 - t0).as_secs_f64() * 1e3);
        bwd.push(t1.elapsed().as_secs_f64() * 1e3);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (f, b) = (median(&mut fwd), median(&mut bwd));
    println!(
        "{} parameters, batch {batch} x {points} points: forward {f:.1} ms, backward {b:.1} ms, {:.0} points/s",
        param_count(&store),
        (batch * points) as f64 / ((f + b) / 1e3)
    );
    Ok(0)
}

fn gen_data(
    g: &Global,
    out: &Path,
    counts: [usize; 3],
    points: usize,
    primitives: usize,
    noise: f64,
    classification: bool,
) -> Result<u8> {
    prepare_run_dir(out, g.overwrite)?;
    let seed = g.seed.unwrap_or(0);
    let total: usize = counts.iter().sum();
    let clouds: Vec<PointSetBatch> = if classification {
        gen_classification_set(&ClassificationSpec {
            num_clouds: total,
            num_points: points,
            noise,
            seed,
            ..ClassificationSpec::default()
        })?
        .into_iter()
        .map(|(c, _)| c)
        .collect()
    } else {
        scene_seeds(seed, total)
            .into_iter()
            .map(|s| {
                gen_segmentation_scene(&SceneSpec {
                    num_points: points,
                    num_primitives: primitives,
                    noise,
                    seed: s,
                    ..SceneSpec::default()
                })
            })
            .collect::<Result<_>>()?
    };
    let splits = [Split::Train, Split::Val, Split::Test];
    let mut entries = Vec::with_capacity(total);
    let mut clouds = clouds.into_iter();
    for (split, &n) in splits.iter().zip(&counts) {
        let sub = out.join(split.to_string());
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        for i in 0..n {
            let cloud = clouds.next().expect("one cloud per entry");
            let rel = PathBuf::from(split.to_string()).join(format!("cloud_{i:05}.txt"));
            write_points(out.join(&rel), &cloud)?;
            entries.push(ManifestEntry { split: *split, path: rel });
        }
    }
    let manifest = out.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    let mut stdout = std::io::stdout();
    writeln!(stdout, "wrote {total} clouds and {}", manifest.display()).ok();
    Ok(0)
}
