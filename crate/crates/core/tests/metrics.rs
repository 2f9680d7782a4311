//! Retrieval metrics against a brute-force sort oracle.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniadapter_core::metrics::{append_csv, read_csv, retrieval_metrics, vqa_accuracy, MetricsRecord};

/// Ranks by sorting the gallery: descending score, lower index first.
fn oracle(scores: &[f64], gallery: usize, truth: &[usize]) -> (f64, f64, f64, f64) {
    let mut ranks: Vec<usize> = truth
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = &scores[i * gallery..(i + 1) * gallery];
            let mut order: Vec<usize> = (0..gallery).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            order.iter().position(|&j| j == t).unwrap() + 1
        })
        .collect();
    let q = truth.len() as f64;
    let rk = |k| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / q;
    let (r1, r5, r10) = (rk(1), rk(5), rk(10));
    ranks.sort();
    let n = ranks.len();
    let mdr = if n % 2 == 1 {
        ranks[n / 2] as f64
    } else {
        (ranks[n / 2 - 1] + ranks[n / 2]) as f64 / 2.0
    };
    (r1, r5, r10, mdr)
}

fn random_case(rng: &mut ChaCha8Rng, q: usize, g: usize, coarse: bool) -> (Vec<f64>, Vec<usize>) {
    let scores = (0..q * g)
        .map(|_| {
            if coarse {
                // few distinct values so ties are common
                rng.random_range(0..4) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect();
    let truth = (0..q).map(|_| rng.random_range(0..g)).collect();
    (scores, truth)
}

#[test]
fn matches_sort_oracle_on_100_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let (q, g) = (rng.random_range(1..30), rng.random_range(10..40));
        let (scores, truth) = random_case(&mut rng, q, g, case % 3 == 0);
        let m = retrieval_metrics(&scores, g, &truth).unwrap();
        let (r1, r5, r10, mdr) = oracle(&scores, g, &truth);
        assert_eq!(
            (m.r1.unwrap(), m.r5.unwrap(), m.r10.unwrap(), m.mdr.unwrap()),
            (r1, r5, r10, mdr),
            "case {case}"
        );
        assert!(m.r1 <= m.r5 && m.r5 <= m.r10);
        assert_eq!(m.rmean, Some((r1 + r5 + r10) / 3.0));
    }
}

#[test]
fn square_20_by_20() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (scores, _) = random_case(&mut rng, 20, 20, false);
    let truth: Vec<usize> = (0..20).collect();
    let m = retrieval_metrics(&scores, 20, &truth).unwrap();
    let (r1, r5, r10, mdr) = oracle(&scores, 20, &truth);
    assert_eq!((m.r1, m.r5, m.r10, m.mdr), (Some(r1), Some(r5), Some(r10), Some(mdr)));
}

#[test]
fn accuracy_examples() {
    let a = vec![vec![3], vec![4, 5], vec![6], vec![7]];
    assert_eq!(vqa_accuracy(&a, &a).unwrap(), 100.0);
    let none: Vec<Vec<usize>> = a.iter().map(|x| vec![x[0] + 1]).collect();
    assert_eq!(vqa_accuracy(&none, &a).unwrap(), 0.0);
    let mut three = a.clone();
    three[1] = vec![4];
    assert_eq!(vqa_accuracy(&three, &a).unwrap(), 75.0);
    assert!(vqa_accuracy(&a[..2], &a).is_err());
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let recs = vec![
        MetricsRecord {
            step: 3,
            split: "test".into(),
            task: "vqa".into(),
            acc: Some(75.0),
            ..Default::default()
        },
        MetricsRecord {
            step: 4,
            split: "downstream".into(),
            task: "retrieval-image".into(),
            loss: Some(0.5),
            ..Default::default()
        },
    ];
    append_csv(&path, &recs[..1]).unwrap();
    append_csv(&path, &recs[1..]).unwrap();
    assert_eq!(read_csv(&path).unwrap(), recs);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,split,task,loss,r1,r5,r10,mdr,rmean,acc");
    assert_eq!(text.lines().count(), 3);
}

proptest! {
    #[test]
    fn recalls_are_monotone_and_rank_only(
        seed in any::<u64>(),
        q in 1usize..12,
        g in 10usize..25,
        a in 0.1f64..5.0,
        b in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scores, truth) = random_case(&mut rng, q, g, seed % 2 == 0);
        let m = retrieval_metrics(&scores, g, &truth).unwrap();
        prop_assert!(m.r1 <= m.r5 && m.r5 <= m.r10);
        for r in [m.r1, m.r5, m.r10] {
            prop_assert!((0.0..=100.0).contains(&r.unwrap()));
        }
        // strictly increasing transform: ranks, hence metrics, unchanged
        let moved: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
        prop_assert_eq!(retrieval_metrics(&moved, g, &truth).unwrap(), m);
    }
}
