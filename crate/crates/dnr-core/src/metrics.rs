//! Ranking metrics and noise-distribution diagnostics.
//!
//! Metrics operate on one candidate list at a time: a score vector and a
//! 0/1 relevance vector of equal length. Ranking is score-descending with
//! ties broken by lower index, so results are deterministic.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::util::argsort_desc;

/// Relevance labels reordered by descending score.
pub fn ranked_labels(scores: &[f64], labels: &[u8]) -> Result<Vec<u8>> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "ranked_labels",
            left: format!("{} scores", scores.len()),
            right: format!("{} labels", labels.len()),
        });
    }
    if scores.is_empty() {
        return Err(Error::Data("empty candidate list".into()));
    }
    Ok(argsort_desc(scores).into_iter().map(|i| labels[i]).collect())
}

fn positives(labels: &[u8]) -> usize {
    labels.iter().filter(|&&l| l > 0).count()
}

fn hits_at_k(ranked: &[u8], k: usize) -> usize {
    positives(&ranked[..k.min(ranked.len())])
}

/// Hit rate at K: fraction of all positives recovered in the top K.
pub fn hr_at_k(ranked: &[u8], k: usize) -> f64 {
    let p = positives(ranked);
    if p == 0 {
        return 0.0;
    }
    hits_at_k(ranked, k) as f64 / p as f64
}

/// NDCG at K with binary gains and log2(rank+1) discounts. Zero when the
/// list has no positives.
pub fn ndcg_at_k(ranked: &[u8], k: usize) -> f64 {
    let p = positives(ranked);
    if p == 0 {
        return 0.0;
    }
    let k = k.min(ranked.len());
    let dcg: f64 = ranked[..k]
        .iter()
        .enumerate()
        .map(|(i, &l)| l as f64 / ((i + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..p.min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    dcg / idcg
}

/// Average precision at K, normalized by min(K, positives).
pub fn map_at_k(ranked: &[u8], k: usize) -> f64 {
    let p = positives(ranked);
    if p == 0 {
        return 0.0;
    }
    let k = k.min(ranked.len());
    let mut hits = 0;
    let mut acc = 0.0;
    for (i, &l) in ranked[..k].iter().enumerate() {
        if l > 0 {
            hits += 1;
            acc += hits as f64 / (i + 1) as f64;
        }
    }
    acc / p.min(k) as f64
}

pub fn precision_at_k(ranked: &[u8], k: usize) -> f64 {
    let k = k.min(ranked.len());
    hits_at_k(ranked, k) as f64 / k as f64
}

pub fn recall_at_k(ranked: &[u8], k: usize) -> f64 {
    let p = positives(ranked);
    if p == 0 {
        return 0.0;
    }
    hits_at_k(ranked, k) as f64 / p as f64
}

pub fn f1_at_k(ranked: &[u8], k: usize) -> f64 {
    let pr = precision_at_k(ranked, k);
    let rc = recall_at_k(ranked, k);
    if pr + rc == 0.0 {
        return 0.0;
    }
    2.0 * pr * rc / (pr + rc)
}

/// List-wise ROC AUC via the rank-sum statistic, with average ranks over
/// tied scores. None when either class is empty.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let p = positives(labels);
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    // ascending order; walk tie groups and hand out the group's mean rank
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share the average
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &orig in &idx[i..j] {
            if labels[orig] > 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (p * (p + 1)) as f64 / 2.0;
    Some(u / (p as f64 * n as f64))
}

/// Per-run evaluation summary: means over candidate lists.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub k: usize,
    pub samples: usize,
    /// lists with no positive label; they still enter the rank-metric means
    pub flagged_no_positive: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// mean over lists where both classes are present
    pub auc: Option<f64>,
    pub auc_samples: usize,
}

/// Average the per-list metrics over an evaluation set.
pub fn evaluate<'a, I>(samples: I, k: usize) -> Result<MetricsReport>
where
    I: IntoIterator<Item = (&'a [f64], &'a [u8])>,
{
    let mut report = MetricsReport {
        k,
        samples: 0,
        flagged_no_positive: 0,
        hr: 0.0,
        ndcg: 0.0,
        map: 0.0,
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        auc: None,
        auc_samples: 0,
    };
    let mut auc_sum = 0.0;
    for (scores, labels) in samples {
        let ranked = ranked_labels(scores, labels)?;
        report.samples += 1;
        if positives(&ranked) == 0 {
            report.flagged_no_positive += 1;
        }
        report.hr += hr_at_k(&ranked, k);
        report.ndcg += ndcg_at_k(&ranked, k);
        report.map += map_at_k(&ranked, k);
        report.precision += precision_at_k(&ranked, k);
        report.recall += recall_at_k(&ranked, k);
        report.f1 += f1_at_k(&ranked, k);
        if let Some(a) = auc(scores, labels) {
            auc_sum += a;
            report.auc_samples += 1;
        }
    }
    if report.samples == 0 {
        return Err(Error::Data("evaluation over an empty sample set".into()));
    }
    let n = report.samples as f64;
    report.hr /= n;
    report.ndcg /= n;
    report.map /= n;
    report.precision /= n;
    report.recall /= n;
    report.f1 /= n;
    if report.auc_samples > 0 {
        report.auc = Some(auc_sum / report.auc_samples as f64);
    }
    Ok(report)
}

// ── noise diagnostics ────────────────────────────────────────────────────

/// Histogram counts over [0, 1] with values clamped into range.
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

fn smoothed(counts: &[usize], total: usize) -> Vec<f64> {
    // Laplace smoothing keeps empty bins off the log singularities
    let denom = (total + counts.len()) as f64;
    counts.iter().map(|&c| (c + 1) as f64 / denom).collect()
}

/// KL(reference-hat || candidate-hat) between Laplace-smoothed histograms
/// on [0, 1]. Low values mean the candidate covers the reference mass.
pub fn histogram_kl(reference: &[f64], candidate: &[f64], bins: usize) -> Result<f64> {
    if reference.is_empty() || candidate.is_empty() {
        return Err(Error::Data("histogram_kl over an empty sample".into()));
    }
    let p = smoothed(&histogram(reference, bins), reference.len());
    let q = smoothed(&histogram(candidate, bins), candidate.len());
    Ok(p.iter().zip(&q).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum())
}

/// Squared MMD between two 1-D samples under an RBF kernel, written
/// independently of the differentiable op so the two can cross-check.
pub fn mmd2_diagnostic(a: &[f64], b: &[f64], bandwidth: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("mmd2 over an empty sample".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::Data(format!("mmd2 bandwidth {bandwidth} must be positive")));
    }
    let k = |x: f64, y: f64| (-(x - y) * (x - y) / (2.0 * bandwidth * bandwidth)).exp();
    let mean_kernel = |xs: &[f64], ys: &[f64]| {
        let mut s = 0.0;
        for &x in xs {
            for &y in ys {
                s += k(x, y);
            }
        }
        s / (xs.len() * ys.len()) as f64
    };
    Ok(mean_kernel(a, a) - 2.0 * mean_kernel(a, b) + mean_kernel(b, b))
}

/// Median of all pairwise absolute differences within a sample; the usual
/// bandwidth pick for the RBF kernel. Falls back to 1.0 when the sample is
/// degenerate (all values equal).
pub fn median_pairwise_distance(values: &[f64]) -> f64 {
    let mut dists = Vec::with_capacity(values.len() * (values.len() - 1) / 2);
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            dists.push((values[i] - values[j]).abs());
        }
    }
    match crate::util::median_of(&mut dists) {
        Some(m) if m > 0.0 => m,
        _ => 1.0,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NoiseDiag {
    pub bins: usize,
    pub kl: f64,
    pub mmd2: f64,
    pub reference_hist: Vec<usize>,
    pub candidate_hist: Vec<usize>,
}

/// Compare a candidate noise sample against a reference sample.
pub fn noise_diagnostics(reference: &[f64], candidate: &[f64], bins: usize) -> Result<NoiseDiag> {
    let bandwidth = {
        let m = median_pairwise_distance(reference);
        if m > 0.0 {
            m
        } else {
            1.0
        }
    };
    Ok(NoiseDiag {
        bins,
        kl: histogram_kl(reference, candidate, bins)?,
        mmd2: mmd2_diagnostic(candidate, reference, bandwidth)?,
        reference_hist: histogram(reference, bins),
        candidate_hist: histogram(candidate, bins),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndcg_hand_case() {
        // ranked labels [1, 0, 1], k=3, two positives
        // dcg = 1/log2(2) + 1/log2(4) = 1 + 0.5; idcg = 1 + 1/log2(3)
        let ranked = [1, 0, 1];
        let expect = 1.5 / (1.0 + 1.0 / 3f64.log2());
        assert!((ndcg_at_k(&ranked, 3) - expect).abs() < 1e-12);
    }

    #[test]
    fn map_hand_case() {
        // ranked [1, 0, 1], k=3: precisions at hits are 1/1 and 2/3,
        // normalized by min(3, 2) = 2
        let expect = (1.0 + 2.0 / 3.0) / 2.0;
        assert!((map_at_k(&[1, 0, 1], 3) - expect).abs() < 1e-12);
    }

    #[test]
    fn k_larger_than_list_is_capped() {
        let ranked = [1, 0];
        assert_eq!(ndcg_at_k(&ranked, 10), ndcg_at_k(&ranked, 2));
        assert_eq!(precision_at_k(&ranked, 10), 0.5);
    }

    #[test]
    fn no_positives_gives_zero_scores() {
        let ranked = [0, 0, 0];
        assert_eq!(hr_at_k(&ranked, 2), 0.0);
        assert_eq!(ndcg_at_k(&ranked, 2), 0.0);
        assert_eq!(map_at_k(&ranked, 2), 0.0);
        assert_eq!(f1_at_k(&ranked, 2), 0.0);
    }

    #[test]
    fn auc_handles_ties_with_average_ranks() {
        // positive tied with one negative, one lower negative:
        // pairs contribute 0.5 + 1.0 out of 2
        let a = auc(&[1.0, 1.0, 0.0], &[1, 0, 0]).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
        assert_eq!(auc(&[0.3, 0.7], &[1, 1]), None);
        assert_eq!(auc(&[0.3, 0.7], &[0, 0]), None);
        // perfect and inverted orderings
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]), Some(1.0));
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]), Some(0.0));
    }

    #[test]
    fn ranking_breaks_ties_by_lower_index() {
        let ranked = ranked_labels(&[0.5, 0.9, 0.5], &[1, 0, 0]).unwrap();
        assert_eq!(ranked, vec![0, 1, 0]);
    }

    #[test]
    fn evaluate_counts_flagged_and_auc_samples() {
        let lists: Vec<(Vec<f64>, Vec<u8>)> = vec![
            (vec![0.9, 0.1], vec![1, 0]),
            (vec![0.4, 0.6], vec![0, 0]), // flagged, no auc
        ];
        let report = evaluate(
            lists.iter().map(|(s, l)| (s.as_slice(), l.as_slice())),
            2,
        )
        .unwrap();
        assert_eq!(report.samples, 2);
        assert_eq!(report.flagged_no_positive, 1);
        assert_eq!(report.auc_samples, 1);
        assert_eq!(report.auc, Some(1.0));
        assert!((report.hr - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_prefers_the_matching_distribution() {
        let reference: Vec<f64> = (0..2000).map(|i| (i as f64 + 0.5) / 2000.0).collect();
        let matching = reference.clone();
        let shifted: Vec<f64> = reference.iter().map(|v| v * 0.3).collect();
        let k_match = histogram_kl(&reference, &matching, 32).unwrap();
        let k_shift = histogram_kl(&reference, &shifted, 32).unwrap();
        assert!(k_match < k_shift);
        assert!(k_match < 1e-3);
    }

    #[test]
    fn mmd_diagnostic_zero_on_identical() {
        let a = [0.1, 0.5, 0.9];
        assert!(mmd2_diagnostic(&a, &a, 0.5).unwrap().abs() < 1e-12);
        assert!(mmd2_diagnostic(&a, &[0.7], 0.5).unwrap() > 0.0);
    }

    #[test]
    fn median_distance_degenerate_falls_back() {
        assert_eq!(median_pairwise_distance(&[0.4, 0.4, 0.4]), 1.0);
        assert!(median_pairwise_distance(&[0.0, 1.0]) == 1.0);
        let m = median_pairwise_distance(&[0.0, 0.5, 1.0]);
        assert_eq!(m, 0.5);
    }
}
