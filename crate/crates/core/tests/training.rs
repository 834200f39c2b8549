use pointvector::dataio::{gen_classification_set, segmentation_dataset, ClassificationSpec, Primitive, SceneSpec};
use pointvector::model::{Model, ModelConfig, Task};
use pointvector::train::{
    perturbation_eval, train_loop, AugmentConfig, Dataset, Perturbation, Sample, Split, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn two_class_clouds(n: usize) -> Vec<Sample> {
    gen_classification_set(&ClassificationSpec {
        num_clouds: n,
        num_points: 64,
        kinds: vec![Primitive::Plane, Primitive::Sphere],
        noise: 0.005,
        seed: 5,
    })
    .unwrap()
    .into_iter()
    .map(|(c, class)| Sample::classification(c, class))
    .collect()
}

fn small_scenes(train: usize, val: usize) -> Dataset {
    let spec = SceneSpec {
        num_points: 128,
        seed: 9,
        ..SceneSpec::default()
    };
    segmentation_dataset(&spec, train, val).unwrap()
}

fn quiet(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr0: 0.005,
        label_smoothing: 0.0,
        augment: AugmentConfig::none(),
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_eight_clouds() {
    let data = Dataset {
        train: two_class_clouds(8),
        val: vec![],
    };
    let cfg = ModelConfig::toy(Task::Classification, 2);
    let train = TrainConfig {
        batch_size: 8,
        lr0: 0.01,
        weight_decay: 0.0,
        ..quiet(200)
    };
    let out = train_loop(&cfg, &train, &data, None).unwrap();
    let hit = out
        .report
        .rows
        .iter()
        .find(|r| r.split == Split::Train && r.loss < 0.05 && r.oa == 1.0);
    let last = out.report.last(Split::Train).unwrap();
    assert!(hit.is_some(), "final train loss {} oa {}", last.loss, last.oa);
}

#[test]
fn seeded_runs_write_identical_artifacts() {
    let data = small_scenes(6, 2);
    let cfg = ModelConfig::toy(Task::Segmentation, 3);
    let train = TrainConfig {
        epochs: 2,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    train_loop(&cfg, &train, &data, Some(a.path())).unwrap();
    train_loop(&cfg, &train, &data, Some(b.path())).unwrap();
    for f in ["metrics.csv", "best.ckpt"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let data = small_scenes(4, 0);
    let cfg = ModelConfig::toy(Task::Segmentation, 3);
    let train = TrainConfig {
        lr0: 0.0,
        weight_decay: 0.0,
        ..quiet(2)
    };
    let out = train_loop(&cfg, &train, &data, None).unwrap();
    let init = Model::new(cfg).unwrap().init(&mut ChaCha8Rng::seed_from_u64(train.seed));
    let before: Vec<_> = init.params().collect();
    let after: Vec<_> = out.last.store.params().collect();
    assert_eq!(before, after);
}

#[test]
fn training_loss_settles_downward() {
    let data = small_scenes(16, 0);
    let cfg = ModelConfig::toy(Task::Segmentation, 3);
    let out = train_loop(&cfg, &quiet(10), &data, None).unwrap();
    let losses: Vec<f64> = out.report.rows.iter().map(|r| r.loss).collect();
    for e in 4..losses.len() {
        assert!(
            losses[e] <= losses[e - 1] * 1.05,
            "epoch {e}: {} after {} ({losses:?})",
            losses[e],
            losses[e - 1]
        );
    }
    assert!(losses[losses.len() - 1] < losses[0]);
}

#[test]
fn identity_and_jointly_rescaled_evaluation_match_clean() {
    let data = small_scenes(6, 3);
    let cfg = ModelConfig::toy(Task::Segmentation, 3);
    let out = train_loop(&cfg, &quiet(2), &data, None).unwrap();
    let model = Model::new(cfg).unwrap();
    let specs = [
        Perturbation::None,
        Perturbation::Scale { factor: 2.0 },
        Perturbation::Scale { factor: 0.5 },
    ];
    let rows = perturbation_eval(&model, &out.last.store, &data.val, &specs, true, 4, 0).unwrap();
    let clean = rows[0].metrics;
    let val = out.report.last(Split::Val).unwrap();
    assert_eq!((clean.oa, clean.miou), (val.oa, val.miou));
    for r in &rows[1..] {
        assert_eq!(r.metrics, clean, "{}", r.label);
        assert_eq!(r.delta_miou, 0.0);
    }
}
