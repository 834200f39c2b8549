use pointvector::train::{Confusion, Metrics};
use proptest::prelude::*;

/// Metrics counted straight from label pairs, without a confusion matrix.
fn loop_metrics(k: usize, pairs: &[(usize, usize)]) -> Metrics {
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    let (mut acc, mut acc_n, mut iou, mut iou_n) = (0.0, 0, 0.0, 0);
    for c in 0..k {
        let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count();
        let fn_ = pairs.iter().filter(|&&(t, p)| t == c && p != c).count();
        let fp = pairs.iter().filter(|&&(t, p)| t != c && p == c).count();
        if tp + fn_ > 0 {
            acc += tp as f64 / (tp + fn_) as f64;
            acc_n += 1;
        }
        if tp + fn_ + fp > 0 {
            iou += tp as f64 / (tp + fn_ + fp) as f64;
            iou_n += 1;
        }
    }
    Metrics {
        oa: correct as f64 / pairs.len() as f64,
        macc: acc / acc_n as f64,
        miou: iou / iou_n as f64,
    }
}

proptest! {
    #[test]
    fn confusion_metrics_match_counting_loop(
        k in 2usize..6,
        raw in prop::collection::vec((0usize..100, 0usize..100), 1..200),
    ) {
        let pairs: Vec<(usize, usize)> = raw.iter().map(|&(t, p)| (t % k, p % k)).collect();
        let mut c = Confusion::new(k);
        for &(t, p) in &pairs {
            c.add(t, p).unwrap();
        }
        let got = c.metrics().unwrap();
        let want = loop_metrics(k, &pairs);
        prop_assert!((got.oa - want.oa).abs() < 1e-12);
        prop_assert!((got.macc - want.macc).abs() < 1e-12);
        prop_assert!((got.miou - want.miou).abs() < 1e-12);
        for m in [got.oa, got.macc, got.miou] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn merged_confusions_equal_one_pass(
        a in prop::collection::vec((0usize..3, 0usize..3), 1..50),
        b in prop::collection::vec((0usize..3, 0usize..3), 1..50),
    ) {
        let fill = |pairs: &[(usize, usize)]| {
            let mut c = Confusion::new(3);
            for &(t, p) in pairs {
                c.add(t, p).unwrap();
            }
            c
        };
        let mut merged = fill(&a);
        merged.merge(&fill(&b)).unwrap();
        let all: Vec<_> = a.iter().chain(&b).copied().collect();
        prop_assert_eq!(merged, fill(&all));
    }
}
