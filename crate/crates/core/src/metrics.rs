//! Ranking metrics for anomaly scoring and a homophily-quartile
//! breakdown of detector performance.
//!
//! All metrics treat higher scores as more anomalous. Ties are handled
//! explicitly: AUROC uses average ranks (equivalent to counting ties as
//! half-concordant), while AUPRC and recall@k order tied scores by
//! ascending node id so results never depend on sort stability.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Area under the ROC curve via the rank-statistic form
/// `(R_pos - n_pos (n_pos + 1) / 2) / (n_pos n_neg)` where `R_pos` is the
/// sum of average ranks of positive scores.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::MetricUndefined {
            metric: "auroc",
            reason: "needs at least one positive and one negative".into(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average rank within each tied block, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = ((i + 1) + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Ok(auc)
}

/// Area under the precision-recall curve as average precision: walk the
/// ranking by descending score (ascending id inside ties) and average
/// the precision at each positive hit.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::MetricUndefined {
            metric: "auprc",
            reason: "needs at least one positive".into(),
        });
    }
    let order = ranked_order(scores);
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (seen, &idx) in order.iter().enumerate() {
        if labels[idx] {
            hits += 1;
            ap += hits as f64 / (seen + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

/// Fraction of positives found in the top `k` of the ranking. When `k`
/// is `None` it defaults to the number of positives.
pub fn recall_at_k(scores: &[f64], labels: &[bool], k: Option<usize>) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::MetricUndefined {
            metric: "recall_at_k",
            reason: "needs at least one positive".into(),
        });
    }
    let k = k.unwrap_or(n_pos).min(scores.len());
    let order = ranked_order(scores);
    let hits = order[..k].iter().filter(|&&idx| labels[idx]).count();
    Ok(hits as f64 / n_pos as f64)
}

/// Indices sorted by descending score; ties broken by ascending index.
fn ranked_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} scores", labels.len()),
            got: format!("{} scores", scores.len()),
        });
    }
    if scores.is_empty() {
        return Err(Error::MetricUndefined {
            metric: "ranking",
            reason: "empty score list".into(),
        });
    }
    if let Some(pos) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::MetricUndefined {
            metric: "ranking",
            reason: format!("non-finite score at index {pos}"),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Homophily quartiles
// ---------------------------------------------------------------------

/// AUROC of one group of anomalies (a homophily quartile) against the
/// full set of test normals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileBucket {
    /// 1 = highest local homophily.
    pub quartile: usize,
    pub num_anomalies: usize,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileReport {
    pub buckets: Vec<QuartileBucket>,
    /// `auroc(Q1) - auroc(Qk)` for each later bucket, signalling how much
    /// harder low-homophily anomalies are for the detector.
    pub q1_gaps: Vec<f64>,
    /// Anomalies left out because their local homophily is undefined.
    pub skipped_undefined: usize,
    /// Set when there were too few anomalies to split and all of them
    /// were evaluated as a single group.
    pub single_group_fallback: bool,
}

/// Split test anomalies into homophily quartiles and score each against
/// all test normals.
///
/// Anomalies are sorted by local homophily descending (ties by node id)
/// and cut into four groups whose sizes differ by at most one, the
/// earlier groups taking the extra node. Fewer than four anomalies fall
/// back to a single group.
pub fn quartile_analysis(
    scores: &[f64],
    labels: &[bool],
    homophily: &[Option<f64>],
    node_ids: &[usize],
) -> Result<QuartileReport> {
    check_inputs(scores, labels)?;
    if homophily.len() != scores.len() || node_ids.len() != scores.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} homophily values and node ids", scores.len()),
            got: format!("{} / {}", homophily.len(), node_ids.len()),
        });
    }

    let normal_scores: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    if normal_scores.is_empty() {
        return Err(Error::MetricUndefined {
            metric: "quartile_analysis",
            reason: "no test normals to compare against".into(),
        });
    }

    // (homophily, node id, score) for anomalies with a defined value.
    let mut anomalies: Vec<(f64, usize, f64)> = Vec::new();
    let mut skipped_undefined = 0;
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        match homophily[i] {
            Some(h) => anomalies.push((h, node_ids[i], scores[i])),
            None => skipped_undefined += 1,
        }
    }
    if anomalies.is_empty() {
        return Err(Error::MetricUndefined {
            metric: "quartile_analysis",
            reason: "no test anomalies with defined local homophily".into(),
        });
    }
    anomalies.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let n = anomalies.len();
    let single_group_fallback = n < 4;
    let group_sizes: Vec<usize> = if single_group_fallback {
        vec![n]
    } else {
        // First n % 4 groups take one extra anomaly.
        (0..4).map(|g| n / 4 + usize::from(g < n % 4)).collect()
    };

    let mut buckets = Vec::with_capacity(group_sizes.len());
    let mut start = 0;
    for (g, &size) in group_sizes.iter().enumerate() {
        let group = &anomalies[start..start + size];
        start += size;
        let mut bucket_scores: Vec<f64> = group.iter().map(|a| a.2).collect();
        let mut bucket_labels = vec![true; bucket_scores.len()];
        bucket_scores.extend_from_slice(&normal_scores);
        bucket_labels.resize(bucket_scores.len(), false);
        buckets.push(QuartileBucket {
            quartile: g + 1,
            num_anomalies: size,
            auroc: auroc(&bucket_scores, &bucket_labels)?,
        });
    }

    let q1 = buckets[0].auroc;
    let q1_gaps = buckets[1..].iter().map(|b| q1 - b.auroc).collect();
    Ok(QuartileReport {
        buckets,
        q1_gaps,
        skipped_undefined,
        single_group_fallback,
    })
}

// ---------------------------------------------------------------------
// Combined report
// ---------------------------------------------------------------------

/// The three ranking metrics over one scored node set, with an optional
/// homophily-quartile breakdown attached by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub auprc: f64,
    pub recall_at_k: f64,
    pub num_scored: usize,
    pub num_anomalies: usize,
    pub quartiles: Option<QuartileReport>,
}

/// Computes AUROC, AUPRC, and Rec@K (K = anomaly count) over one scored
/// set. The quartile breakdown needs per-node homophily, so the caller
/// computes it separately and passes it in.
pub fn evaluate(
    scores: &[f64],
    labels: &[bool],
    quartiles: Option<QuartileReport>,
) -> Result<EvalReport> {
    Ok(EvalReport {
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
        recall_at_k: recall_at_k(scores, labels, None)?,
        num_scored: scores.len(),
        num_anomalies: labels.iter().filter(|&&l| l).count(),
        quartiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_perfect_and_inverted() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);
        let inverted = [false, false, true, true];
        assert_eq!(auroc(&scores, &inverted).unwrap(), 0.0);
    }

    #[test]
    fn auroc_all_tied_is_half() {
        let scores = [0.5, 0.5, 0.5, 0.5];
        let labels = [true, false, true, false];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn auroc_three_point_interleaved() {
        // Positives at ranks 1 and 3 of 3: one concordant and one
        // discordant pair out of two, giving exactly one half.
        let scores = [0.9, 0.8, 0.7];
        let labels = [true, false, true];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn auroc_four_point_interleaved() {
        // Positives at ranks 1 and 3 of 4: three concordant pairs out of
        // four (the rank-3 positive beats the rank-4 negative only).
        let scores = [0.9, 0.8, 0.7, 0.6];
        let labels = [true, false, true, false];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.75);
    }

    #[test]
    fn auprc_two_positive_case() {
        // Hits at ranks 1 and 3: AP = (1/1 + 2/3) / 2 = 5/6.
        let scores = [0.9, 0.8, 0.7];
        let labels = [true, false, true];
        let got = auprc(&scores, &labels).unwrap();
        assert!((got - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn recall_defaults_to_positive_count() {
        let scores = [0.9, 0.8, 0.7, 0.6];
        let labels = [true, false, true, false];
        // Top 2 holds one of the two positives.
        assert_eq!(recall_at_k(&scores, &labels, None).unwrap(), 0.5);
        assert_eq!(recall_at_k(&scores, &labels, Some(3)).unwrap(), 1.0);
        assert_eq!(recall_at_k(&scores, &labels, Some(100)).unwrap(), 1.0);
    }

    #[test]
    fn tied_scores_rank_by_ascending_id() {
        // Both metrics must place index 1 ahead of index 2 at equal score.
        let scores = [0.9, 0.5, 0.5];
        let labels = [false, true, false];
        assert_eq!(recall_at_k(&scores, &labels, Some(2)).unwrap(), 1.0);
        let swapped = [false, false, true];
        assert_eq!(recall_at_k(&scores, &swapped, Some(2)).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_labels_error() {
        let scores = [0.9, 0.8];
        assert!(matches!(
            auroc(&scores, &[true, true]),
            Err(Error::MetricUndefined { .. })
        ));
        assert!(matches!(
            auprc(&scores, &[false, false]),
            Err(Error::MetricUndefined { .. })
        ));
    }

    #[test]
    fn non_finite_scores_rejected() {
        let scores = [0.9, f64::NAN];
        let labels = [true, false];
        assert!(auroc(&scores, &labels).is_err());
    }

    #[test]
    fn quartiles_split_sizes_base_plus_one() {
        // 10 anomalies -> group sizes 3, 3, 2, 2.
        let n_anom = 10;
        let n_norm = 20;
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut hom = Vec::new();
        let mut ids = Vec::new();
        for i in 0..n_anom {
            scores.push(1.0 - i as f64 * 0.01);
            labels.push(true);
            hom.push(Some(1.0 - i as f64 * 0.05));
            ids.push(i);
        }
        for i in 0..n_norm {
            scores.push(0.1);
            labels.push(false);
            hom.push(Some(0.9));
            ids.push(n_anom + i);
        }
        let report = quartile_analysis(&scores, &labels, &hom, &ids).unwrap();
        let sizes: Vec<usize> = report.buckets.iter().map(|b| b.num_anomalies).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
        assert!(!report.single_group_fallback);
        assert_eq!(report.q1_gaps.len(), 3);
    }

    #[test]
    fn quartiles_fall_back_below_four_anomalies() {
        let scores = [0.9, 0.8, 0.1, 0.2, 0.3];
        let labels = [true, true, false, false, false];
        let hom = [Some(0.5), None, Some(0.9), Some(0.9), Some(0.9)];
        let ids = [0, 1, 2, 3, 4];
        let report = quartile_analysis(&scores, &labels, &hom, &ids).unwrap();
        assert!(report.single_group_fallback);
        assert_eq!(report.buckets.len(), 1);
        assert_eq!(report.skipped_undefined, 1);
        assert_eq!(report.buckets[0].auroc, 1.0);
    }
}
