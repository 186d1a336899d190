//! Ranking metrics against brute-force references: exhaustive sweeps
//! over every labeling of small scored sets (with and without ties),
//! worked values, monotone-transform invariance, and the quartile
//! partition contract.

mod common;

use apf_core::metrics::{auprc, auroc, quartile_analysis, recall_at_k};
use rand::prelude::*;
use rand::rngs::StdRng;

fn labeling(mask: u32, n: usize) -> Vec<bool> {
    (0..n).map(|i| mask & (1 << i) != 0).collect()
}

fn sweep_all_labelings(mut scores_for: impl FnMut(usize) -> Vec<f64>) {
    for n in 1..=8 {
        let scores = scores_for(n);
        for mask in 0u32..(1 << n) {
            let labels = labeling(mask, n);
            let pos = labels.iter().filter(|&&l| l).count();

            if pos > 0 && pos < n {
                let got = auroc(&scores, &labels).unwrap();
                let want = common::auroc_brute(&scores, &labels);
                assert!(
                    (got - want).abs() < 1e-12,
                    "auroc n={n} mask={mask:b}: {got} vs {want}"
                );
            }
            if pos > 0 {
                let got = auprc(&scores, &labels).unwrap();
                let want = common::auprc_brute(&scores, &labels);
                assert!(
                    (got - want).abs() < 1e-12,
                    "auprc n={n} mask={mask:b}: {got} vs {want}"
                );
                let got = recall_at_k(&scores, &labels, None).unwrap();
                let want = common::recall_brute(&scores, &labels);
                assert!(
                    (got - want).abs() < 1e-12,
                    "recall n={n} mask={mask:b}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn exhaustive_labelings_with_distinct_scores() {
    // Descending by id, so rank order and id order coincide.
    sweep_all_labelings(|n| (0..n).map(|i| (n - i) as f64).collect());
}

#[test]
fn exhaustive_labelings_with_shuffled_scores() {
    let mut rng = StdRng::seed_from_u64(8);
    sweep_all_labelings(move |n| {
        let mut s: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        s.shuffle(&mut rng);
        s
    });
}

#[test]
fn exhaustive_labelings_with_tied_scores() {
    // Adjacent ids share a score, exercising average-rank AUROC and the
    // id-order tie policy in the sorted metrics.
    sweep_all_labelings(|n| (0..n).map(|i| (i / 2) as f64).collect());
}

#[test]
fn worked_values_reproduce() {
    // Positives at ranks 1 and 3 of 4: three of four pairs concordant.
    let scores = [0.9, 0.8, 0.7, 0.6];
    let labels = [true, false, true, false];
    assert_eq!(auroc(&scores, &labels).unwrap(), 0.75);

    // Hits at ranks 1 and 3: average precision (1/1 + 2/3) / 2.
    let scores = [0.9, 0.8, 0.7];
    let labels = [true, false, true];
    let got = auprc(&scores, &labels).unwrap();
    assert!((got - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(format!("{got:.4}"), "0.8333");

    // Two positives, one inside the top two ranks.
    let scores = [0.9, 0.85, 0.2, 0.1];
    let labels = [true, false, true, false];
    assert_eq!(recall_at_k(&scores, &labels, None).unwrap(), 0.5);
}

#[test]
fn auroc_is_invariant_under_monotone_transforms() {
    let mut rng = StdRng::seed_from_u64(21);
    for _ in 0..50 {
        let n = rng.random_range(4..=40);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let base = auroc(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|&s| s.exp() + 1.0).collect();
        let affine: Vec<f64> = scores.iter().map(|&s| 3.0 * s - 7.0).collect();
        assert_eq!(auroc(&exp, &labels).unwrap(), base);
        assert_eq!(auroc(&affine, &labels).unwrap(), base);
    }
}

#[test]
fn quartiles_partition_every_anomaly_with_balanced_sizes() {
    let mut rng = StdRng::seed_from_u64(303);
    for _ in 0..30 {
        let n = rng.random_range(20..=60);
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 5 == 0 || rng.random::<f64>() < 0.2).collect();
        let homophily: Vec<Option<f64>> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < 0.9 {
                    Some(rng.random::<f64>())
                } else {
                    None
                }
            })
            .collect();
        let ids: Vec<usize> = (0..n).collect();
        let report = quartile_analysis(&scores, &labels, &homophily, &ids).unwrap();

        let defined_anomalies = (0..n)
            .filter(|&i| labels[i] && homophily[i].is_some())
            .count();
        let bucketed: usize = report.buckets.iter().map(|b| b.num_anomalies).sum();
        assert_eq!(bucketed + report.skipped_undefined, (0..n).filter(|&i| labels[i]).count());
        assert_eq!(bucketed, defined_anomalies);

        if report.buckets.len() == 4 {
            let sizes: Vec<usize> = report.buckets.iter().map(|b| b.num_anomalies).collect();
            let min = *sizes.iter().min().unwrap();
            let max = *sizes.iter().max().unwrap();
            assert!(max - min <= 1, "quartile sizes {sizes:?} differ by more than one");
        }
        for b in &report.buckets {
            assert!((0.0..=1.0).contains(&b.auroc));
        }
    }
}
