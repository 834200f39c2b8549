use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::train::Split;

fn spec(kinds: Vec<Primitive>, noise: f64, seed: u64) -> SceneSpec {
    SceneSpec {
        num_points: 300,
        num_primitives: 3,
        kinds,
        noise,
        seed,
    }
}

#[test]
fn noiseless_plane_scene_is_coplanar_per_primitive() {
    let s = SceneSpec {
        num_primitives: 1,
        ..spec(vec![Primitive::Plane], 0.0, 3)
    };
    let scene = gen_scene(&s).unwrap();
    assert!(scene.cloud.labels().unwrap().iter().all(|&l| l == 0));
    let prim = scene.primitives[0];
    for p in scene.cloud.positions().chunks_exact(3) {
        let r = sub([p[0], p[1], p[2]], prim.center);
        assert!(dot(r, prim.axis).abs() < 1e-9);
    }
}

#[test]
fn same_seed_gives_same_scene() {
    let s = spec(Primitive::ALL.to_vec(), 0.01, 11);
    assert_eq!(gen_scene(&s).unwrap(), gen_scene(&s).unwrap());
    let other = SceneSpec { seed: 12, ..s.clone() };
    assert_ne!(gen_segmentation_scene(&s).unwrap(), gen_segmentation_scene(&other).unwrap());
}

#[test]
fn class_histogram_matches_allocation() {
    let s = SceneSpec {
        num_points: 301,
        num_primitives: 4,
        ..spec(Primitive::ALL.to_vec(), 0.01, 5)
    };
    let scene = gen_scene(&s).unwrap();
    let mut expected = [0usize; 3];
    for (i, p) in scene.primitives.iter().enumerate() {
        expected[p.class] += 301 / 4 + usize::from(i < 301 % 4);
    }
    let mut got = [0usize; 3];
    for &l in scene.cloud.labels().unwrap() {
        got[l] += 1;
    }
    assert_eq!(got, expected);
}

#[test]
fn empty_kind_set_is_a_config_error() {
    assert!(matches!(gen_scene(&spec(vec![], 0.0, 0)), Err(Error::Config(_))));
    let c = ClassificationSpec {
        kinds: vec![],
        ..ClassificationSpec::default()
    };
    assert!(matches!(gen_classification_set(&c), Err(Error::Config(_))));
}

#[test]
fn nearest_primitive_recovers_labels_without_noise() {
    for seed in 0..5 {
        let scene = gen_scene(&spec(Primitive::ALL.to_vec(), 0.0, seed)).unwrap();
        for (p, &label) in scene.cloud.positions().chunks_exact(3).zip(scene.cloud.labels().unwrap()) {
            let p = [p[0], p[1], p[2]];
            let nearest = scene
                .primitives
                .iter()
                .min_by(|a, b| a.distance(p).total_cmp(&b.distance(p)))
                .unwrap();
            assert_eq!(nearest.class, label);
        }
    }
}

#[test]
fn sphere_clouds_stay_within_three_sigma_of_radius() {
    let sigma = 0.02;
    let c = ClassificationSpec {
        num_clouds: 4,
        num_points: 200,
        kinds: vec![Primitive::Sphere],
        noise: sigma,
        seed: 1,
    };
    for (cloud, class) in gen_classification_set(&c).unwrap() {
        assert_eq!(class, 0);
        let radii: Vec<f64> = cloud
            .positions()
            .chunks_exact(3)
            .map(|p| norm([p[0], p[1], p[2]]))
            .collect();
        let lo = radii.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = radii.iter().cloned().fold(0.0, f64::max);
        // the true radius lies in [0.25, 0.4]; every point is within 3 sigma of it
        assert!(hi - lo <= 6.0 * sigma + 1e-12);
        assert!(lo >= 0.25 - 3.0 * sigma && hi <= 0.4 + 3.0 * sigma);
    }
}

#[test]
fn classification_labels_cover_requested_kinds() {
    for k in 1..=3 {
        let c = ClassificationSpec {
            num_clouds: 10,
            num_points: 16,
            kinds: Primitive::ALL[..k].to_vec(),
            ..ClassificationSpec::default()
        };
        let set = gen_classification_set(&c).unwrap();
        let mut seen: Vec<usize> = set.iter().map(|(_, y)| *y).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, (0..k).collect::<Vec<_>>());
        assert_eq!(set, gen_classification_set(&c).unwrap());
    }
}

#[test]
fn datasets_split_train_and_val() {
    let s = SceneSpec {
        num_points: 64,
        ..SceneSpec::default()
    };
    let d = segmentation_dataset(&s, 5, 2).unwrap();
    assert_eq!((d.train.len(), d.val.len()), (5, 2));
    assert_ne!(d.train[0], d.val[0]);
    let c = classification_dataset(&ClassificationSpec::default(), 6).unwrap();
    assert_eq!((c.train.len(), c.val.len()), (64, 6));
}

#[test]
fn text_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pos: Vec<f64> = (0..60).map(|_| rng.random_range(-1e3..1e3) / 7.0).collect();
    let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..5)).collect();
    let cloud = PointSetBatch::from_positions(1, 20, pos, Some(labels)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.txt");
    write_points(&path, &cloud).unwrap();
    assert_eq!(read_points(&path).unwrap(), cloud);
}

#[test]
fn short_line_is_a_parse_error_with_line_number() {
    let err = parse_points("# header\n0 0 0\n1 2\n").unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    let err = parse_points("0 0 0\n1 x 2\n").unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }));
}

#[test]
fn mixed_columns_are_a_format_error() {
    assert!(matches!(parse_points("0 0 0 1\n1 1 1\n"), Err(Error::Format(_))));
}

#[test]
fn comment_only_file_is_an_empty_cloud_error() {
    assert!(matches!(parse_points("# nothing\n\n  # here\n"), Err(Error::Data(_))));
}

#[test]
fn comments_and_labels_parse() {
    let c = parse_points("1 2 3 0 # first\n\n4 5 6 2\n").unwrap();
    assert_eq!(c.points(), 2);
    assert_eq!(c.labels(), Some(&[0, 2][..]));
    assert_eq!(c.position(0, 1), [4.0, 5.0, 6.0]);
}

#[test]
fn manifest_round_trip_and_loading() {
    let dir = tempfile::tempdir().unwrap();
    let s = SceneSpec {
        num_points: 32,
        ..SceneSpec::default()
    };
    let mut entries = Vec::new();
    for (i, split) in [Split::Train, Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
        let cloud = gen_segmentation_scene(&SceneSpec { seed: i as u64, ..s.clone() }).unwrap();
        let name = format!("scene{i}.txt");
        write_points(dir.path().join(&name), &cloud).unwrap();
        entries.push(ManifestEntry {
            split,
            path: name.into(),
        });
    }
    let manifest = dir.path().join("manifest.txt");
    write_manifest(&manifest, &entries).unwrap();
    let back = read_manifest(&manifest).unwrap();
    assert_eq!(back.len(), 4);
    assert_eq!(back[2].split, Split::Val);
    assert_eq!(back[2].path, dir.path().join("scene2.txt"));
    let data = load_manifest_dataset(&manifest, crate::model::Task::Segmentation).unwrap();
    assert_eq!((data.train.len(), data.val.len()), (2, 1));
    assert!(matches!(
        load_manifest_dataset(&manifest, crate::model::Task::Classification),
        Err(Error::Data(_))
    ));
    std::fs::write(&manifest, "dev scene0.txt\n").unwrap();
    assert!(matches!(read_manifest(&manifest), Err(Error::Parse { line: 1, .. })));
}

proptest! {
    #[test]
    fn generation_is_a_pure_function_of_the_spec(seed in any::<u64>(), n in 3usize..80, prims in 1usize..4) {
        let s = SceneSpec { num_points: n, num_primitives: prims, seed, ..SceneSpec::default() };
        let a = gen_segmentation_scene(&s).unwrap();
        prop_assert_eq!(&a, &gen_segmentation_scene(&s).unwrap());
        prop_assert_eq!(a.points(), n);
        prop_assert!(a.labels().unwrap().iter().all(|&l| l < 3));
    }

    #[test]
    fn text_round_trip_holds_for_any_finite_coordinates(
        coords in proptest::collection::vec(-1e300f64..1e300, 3..60)
    ) {
        let n = coords.len() / 3;
        let cloud = PointSetBatch::from_positions(1, n, coords[..n * 3].to_vec(), None).unwrap();
        prop_assert_eq!(parse_points(&format_points(&cloud)).unwrap(), cloud);
    }
}
