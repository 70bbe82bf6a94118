//! Classification metrics: accuracy, macro precision/recall/F1 and macro one-vs-rest AUROC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::ProbVector;
use crate::special::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_auroc: f64,
}

/// Metrics of predicted distributions against labels. Argmax ties go to the lowest class;
/// a class with no predicted (or no true) members scores 0 precision (or recall).
pub fn compute_metrics(predictions: &[ProbVector], labels: &[usize]) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::InvalidDimensions("no predictions".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::InvalidDimensions(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let k = predictions[0].len();
    if predictions.iter().any(|p| p.len() != k) || labels.iter().any(|&y| y >= k) {
        return Err(Error::InvalidDimensions(
            "ragged predictions or label out of range".into(),
        ));
    }
    let n = labels.len() as f64;
    let mut tp = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let mut actual = vec![0usize; k];
    for (p, &y) in predictions.iter().zip(labels) {
        let hat = argmax(p.values());
        predicted[hat] += 1;
        actual[y] += 1;
        if hat == y {
            tp[y] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision: Vec<f64> = (0..k).map(|c| ratio(tp[c], predicted[c])).collect();
    let recall: Vec<f64> = (0..k).map(|c| ratio(tp[c], actual[c])).collect();
    let f1: Vec<f64> = precision
        .iter()
        .zip(&recall)
        .map(|(p, r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let aucs: Vec<f64> = (0..k)
        .filter_map(|c| {
            let scores: Vec<f64> = predictions.iter().map(|p| p[c]).collect();
            let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            binary_auroc(&scores, &positive)
        })
        .collect();
    let macro_auroc = if aucs.is_empty() { 0.5 } else { mean(&aucs) };

    Ok(MetricsReport {
        accuracy: tp.iter().sum::<usize>() as f64 / n,
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        macro_auroc,
    })
}

/// Rank-sum AUROC with midranks for ties (equal to the trapezoidal ROC area); `None` when
/// either class is absent.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&t| positive[order[t]]).count() as f64 * midrank;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary(scores: &[f64]) -> Vec<ProbVector> {
        scores
            .iter()
            .map(|s| ProbVector::new(vec![1.0 - s, *s]).unwrap())
            .collect()
    }

    #[test]
    fn perfect_one_hot_predictions() {
        let preds: Vec<ProbVector> = [0, 1, 2, 1]
            .iter()
            .map(|&y| {
                let mut v = vec![0.0; 3];
                v[y] = 1.0;
                ProbVector::new(v).unwrap()
            })
            .collect();
        let m = compute_metrics(&preds, &[0, 1, 2, 1]).unwrap();
        assert_eq!(
            m,
            MetricsReport {
                accuracy: 1.0,
                macro_precision: 1.0,
                macro_recall: 1.0,
                macro_f1: 1.0,
                macro_auroc: 1.0
            }
        );
    }

    #[test]
    fn auroc_examples() {
        let m = compute_metrics(&binary(&[0.9, 0.8, 0.3, 0.1]), &[1, 1, 0, 0]).unwrap();
        assert_eq!(m.macro_auroc, 1.0);
        let m = compute_metrics(&binary(&[0.9, 0.4, 0.6, 0.1]), &[1, 0, 1, 0]).unwrap();
        assert_eq!(m.macro_auroc, 1.0);
        assert_eq!(binary_auroc(&[0.5, 0.5], &[true, false]), Some(0.5));
    }

    #[test]
    fn input_errors() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&binary(&[0.5]), &[0, 1]).is_err());
    }

    #[test]
    fn zero_division_counts_as_zero() {
        // class 1 is never predicted
        let m = compute_metrics(&binary(&[0.1, 0.2, 0.3]), &[0, 1, 0]).unwrap();
        assert!((m.macro_precision - (2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((m.macro_recall - 0.5).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_go_to_class_zero() {
        let m = compute_metrics(&binary(&[0.5, 0.5]), &[0, 1]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.macro_recall, 0.5);
    }

    fn pairwise_oracle(scores: &[f64], positive: &[bool]) -> f64 {
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if positive[i] && !positive[j] {
                    pairs += 1.0;
                    acc += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        acc / pairs
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn auroc_matches_pairwise_counts(
            data in prop::collection::vec((0u8..8, any::<bool>()), 2..60)
        ) {
            // coarse scores force ties
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 8.0).collect();
            let positive: Vec<bool> = data.iter().map(|(_, p)| *p).collect();
            prop_assume!(positive.iter().any(|p| *p) && positive.iter().any(|p| !*p));
            let got = binary_auroc(&scores, &positive).unwrap();
            prop_assert!((got - pairwise_oracle(&scores, &positive)).abs() < 1e-10);
        }

        #[test]
        fn f1_never_exceeds_precision_and_recall(
            data in prop::collection::vec((0.0f64..1.0, 0usize..2), 1..40)
        ) {
            let preds = binary(&data.iter().map(|d| d.0).collect::<Vec<_>>());
            let labels: Vec<usize> = data.iter().map(|d| d.1).collect();
            let m = compute_metrics(&preds, &labels).unwrap();
            for v in [m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1, m.macro_auroc] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(m.macro_f1 <= m.macro_precision.max(m.macro_recall) + 1e-12);
        }
    }
}
