//! Confusion-matrix evaluation: balanced accuracy and macro-averaged
//! sensitivity, specificity, and F1.
//!
//! All averaging is unweighted over classes. Zero-division cases inside the
//! F1 computation (no predicted positives, or precision and recall both
//! zero) contribute 0 for that class.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major M-by-M count matrix indexed (true class, predicted class).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    m: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            counts: vec![0; m * m],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.m
    }

    pub fn get(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.m + col]
    }

    pub fn row_sum(&self, row: usize) -> u64 {
        self.counts[row * self.m..(row + 1) * self.m].iter().sum()
    }

    pub fn col_sum(&self, col: usize) -> u64 {
        (0..self.m).map(|r| self.get(r, col)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn require_full_rows(&self) -> Result<()> {
        for row in 0..self.m {
            if self.row_sum(row) == 0 {
                return Err(Error::Metric(format!(
                    "class {} has no true instances",
                    row
                )));
            }
        }
        Ok(())
    }
}

/// Tallies a confusion matrix from parallel label lists.
pub fn confusion(truth: &[usize], predicted: &[usize], m: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::validation(format!(
            "label lists differ in length: {} vs {}",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(m);
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= m || p >= m {
            return Err(Error::validation(format!(
                "label out of range: true {}, predicted {}, classes {}",
                t, p, m
            )));
        }
        cm.counts[t * m + p] += 1;
    }
    Ok(cm)
}

/// Mean per-class recall. Errors when a class has no true instances.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(mean(&per_class_recall(cm)?))
}

/// Per-class recall, diagonal over row sum.
pub fn per_class_recall(cm: &ConfusionMatrix) -> Result<Vec<f64>> {
    cm.require_full_rows()?;
    Ok((0..cm.m)
        .map(|r| cm.get(r, r) as f64 / cm.row_sum(r) as f64)
        .collect())
}

/// Macro-averaged one-vs-rest sensitivity. Definitionally identical to
/// `balanced_accuracy`: one-vs-rest TP/(TP+FN) for class r is exactly the
/// recall of row r.
pub fn macro_sensitivity(cm: &ConfusionMatrix) -> Result<f64> {
    balanced_accuracy(cm)
}

/// Macro-averaged one-vs-rest specificity, TN/(TN+FP) per class.
pub fn macro_specificity(cm: &ConfusionMatrix) -> Result<f64> {
    cm.require_full_rows()?;
    let total = cm.total();
    let values: Vec<f64> = (0..cm.m)
        .map(|j| {
            let tp = cm.get(j, j);
            let fp = cm.col_sum(j) - tp;
            let fn_ = cm.row_sum(j) - tp;
            let tn = total - tp - fp - fn_;
            ratio_or_zero(tn as f64, (tn + fp) as f64)
        })
        .collect();
    Ok(mean(&values))
}

/// Macro-averaged one-vs-rest F1 with the zero-division convention.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.require_full_rows()?;
    let values: Vec<f64> = (0..cm.m)
        .map(|j| {
            let tp = cm.get(j, j);
            let fp = cm.col_sum(j) - tp;
            let fn_ = cm.row_sum(j) - tp;
            let precision = ratio_or_zero(tp as f64, (tp + fp) as f64);
            let recall = ratio_or_zero(tp as f64, (tp + fn_) as f64);
            ratio_or_zero(2.0 * precision * recall, precision + recall)
        })
        .collect();
    Ok(mean(&values))
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// All four metrics plus per-class recall for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Fold index, or `None` for a cross-fold aggregate.
    pub fold: Option<usize>,
    pub bma: f64,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub macro_f1: f64,
    pub per_class_recall: Vec<f64>,
}

impl EvaluationReport {
    /// Computes every metric from parallel label lists.
    pub fn from_labels(
        truth: &[usize],
        predicted: &[usize],
        m: usize,
        fold: Option<usize>,
    ) -> Result<Self> {
        let cm = confusion(truth, predicted, m)?;
        Self::from_confusion(&cm, fold)
    }

    pub fn from_confusion(cm: &ConfusionMatrix, fold: Option<usize>) -> Result<Self> {
        Ok(Self {
            fold,
            bma: balanced_accuracy(cm)?,
            macro_sensitivity: macro_sensitivity(cm)?,
            macro_specificity: macro_specificity(cm)?,
            macro_f1: macro_f1(cm)?,
            per_class_recall: per_class_recall(cm)?,
        })
    }

    /// Unweighted mean of several reports, field by field.
    pub fn mean_of(reports: &[EvaluationReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Metric("cannot average zero reports".into()))?;
        let classes = first.per_class_recall.len();
        if reports
            .iter()
            .any(|r| r.per_class_recall.len() != classes)
        {
            return Err(Error::Metric(
                "reports disagree on the number of classes".into(),
            ));
        }
        let n = reports.len() as f64;
        let mut per_class_recall = vec![0.0; classes];
        for r in reports {
            for (acc, &v) in per_class_recall.iter_mut().zip(&r.per_class_recall) {
                *acc += v / n;
            }
        }
        Ok(Self {
            fold: None,
            bma: reports.iter().map(|r| r.bma).sum::<f64>() / n,
            macro_sensitivity: reports.iter().map(|r| r.macro_sensitivity).sum::<f64>() / n,
            macro_specificity: reports.iter().map(|r| r.macro_specificity).sum::<f64>() / n,
            macro_f1: reports.iter().map(|r| r.macro_f1).sum::<f64>() / n,
            per_class_recall,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cm_from(rows: &[&[u64]]) -> ConfusionMatrix {
        let m = rows.len();
        let mut cm = ConfusionMatrix::new(m);
        for (r, row) in rows.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                cm.counts[r * m + c] = v;
            }
        }
        cm
    }

    /// Independent re-derivation of the one-vs-rest metrics, written with
    /// explicit per-cell scans rather than row/column sums.
    fn brute_force(cm: &ConfusionMatrix) -> (f64, f64, f64, f64) {
        let m = cm.num_classes();
        let mut sens = Vec::new();
        let mut spec = Vec::new();
        let mut f1s = Vec::new();
        for j in 0..m {
            let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
            for r in 0..m {
                for c in 0..m {
                    let v = cm.get(r, c);
                    match (r == j, c == j) {
                        (true, true) => tp += v,
                        (false, true) => fp += v,
                        (true, false) => fn_ += v,
                        (false, false) => tn += v,
                    }
                }
            }
            sens.push(tp as f64 / (tp + fn_) as f64);
            spec.push(if tn + fp == 0 {
                0.0
            } else {
                tn as f64 / (tn + fp) as f64
            });
            let p = if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let r = tp as f64 / (tp + fn_) as f64;
            f1s.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
        }
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (avg(&sens), avg(&sens), avg(&spec), avg(&f1s))
    }

    #[test]
    fn tallies_directly() {
        let cm = confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(cm.get(0, 0), 1);
        assert_eq!(cm.get(0, 1), 1);
        assert_eq!(cm.get(1, 0), 0);
        assert_eq!(cm.get(1, 1), 1);
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn empty_lists_give_zero_matrix() {
        let cm = confusion(&[], &[], 3).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn rejects_mismatched_or_out_of_range() {
        assert!(confusion(&[0], &[], 2).is_err());
        assert!(confusion(&[0, 2], &[0, 0], 2).is_err());
        assert!(confusion(&[0, 0], &[0, 5], 2).is_err());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let cm = cm_from(&[&[4, 0], &[0, 7]]);
        assert_eq!(balanced_accuracy(&cm).unwrap(), 1.0);
        assert_eq!(macro_sensitivity(&cm).unwrap(), 1.0);
        assert_eq!(macro_specificity(&cm).unwrap(), 1.0);
        assert_eq!(macro_f1(&cm).unwrap(), 1.0);
    }

    #[test]
    fn worked_two_class_example() {
        let cm = cm_from(&[&[9, 1], &[2, 3]]);
        assert!((balanced_accuracy(&cm).unwrap() - 0.75).abs() < 1e-15);
        assert!((macro_specificity(&cm).unwrap() - 0.75).abs() < 1e-15);
        let f1_a = 2.0 * (9.0 / 11.0) * 0.9 / (9.0 / 11.0 + 0.9);
        let f1_b = 2.0 * 0.75 * 0.6 / (0.75 + 0.6);
        assert!((macro_f1(&cm).unwrap() - (f1_a + f1_b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_row_error_names_the_class() {
        let cm = cm_from(&[&[3, 0], &[0, 0]]);
        let err = balanced_accuracy(&cm).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }

    #[test]
    fn uniform_random_predictions_approach_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = 4;
        let n = 10_000;
        let truth: Vec<usize> = (0..n).map(|i| i % m).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let cm = confusion(&truth, &pred, m).unwrap();
        let bma = balanced_accuracy(&cm).unwrap();
        assert!((bma - 0.25).abs() < 0.02, "bma {}", bma);
    }

    #[test]
    fn zero_predicted_positives_contribute_zero_f1() {
        let cm = cm_from(&[&[5, 0], &[3, 0]]);
        let f1_a = 2.0 * (5.0 / 8.0) * 1.0 / (5.0 / 8.0 + 1.0);
        assert!((macro_f1(&cm).unwrap() - f1_a / 2.0).abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let m = rng.random_range(2..=8);
            let mut cm = ConfusionMatrix::new(m);
            for r in 0..m {
                cm.counts[r * m + rng.random_range(0..m)] += 1;
                for c in 0..m {
                    cm.counts[r * m + c] += rng.random_range(0..=50);
                }
            }
            let (bma, sens, spec, f1) = brute_force(&cm);
            assert!((balanced_accuracy(&cm).unwrap() - bma).abs() < 1e-12);
            assert!((macro_sensitivity(&cm).unwrap() - sens).abs() < 1e-12);
            assert!((macro_specificity(&cm).unwrap() - spec).abs() < 1e-12);
            assert!((macro_f1(&cm).unwrap() - f1).abs() < 1e-12);
        }
    }

    #[test]
    fn report_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let report =
            EvaluationReport::from_labels(&[0, 0, 1, 1], &[0, 1, 1, 1], 2, Some(3)).unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        let back = EvaluationReport::load(&path).unwrap();
        assert_eq!(report, back);
        assert_eq!(back.fold, Some(3));
        assert_eq!(back.bma, back.macro_sensitivity);
    }

    #[test]
    fn mean_report_averages_fields() {
        let a = EvaluationReport {
            fold: Some(0),
            bma: 0.5,
            macro_sensitivity: 0.5,
            macro_specificity: 0.7,
            macro_f1: 0.4,
            per_class_recall: vec![0.4, 0.6],
        };
        let b = EvaluationReport {
            fold: Some(1),
            bma: 0.7,
            macro_sensitivity: 0.7,
            macro_specificity: 0.9,
            macro_f1: 0.6,
            per_class_recall: vec![0.6, 0.8],
        };
        let mean = EvaluationReport::mean_of(&[a, b]).unwrap();
        assert_eq!(mean.fold, None);
        assert!((mean.bma - 0.6).abs() < 1e-15);
        assert!((mean.per_class_recall[1] - 0.7).abs() < 1e-15);
    }

    fn random_cm(rng: &mut ChaCha8Rng, m: usize) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(m);
        for r in 0..m {
            cm.counts[r * m + rng.random_range(0..m)] += 1;
            for c in 0..m {
                cm.counts[r * m + c] += rng.random_range(0..20);
            }
        }
        cm
    }

    proptest! {
        #[test]
        fn bma_equals_macro_sensitivity_exactly(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.random_range(2..=6);
            let cm = random_cm(&mut rng, m);
            prop_assert_eq!(
                balanced_accuracy(&cm).unwrap(),
                macro_sensitivity(&cm).unwrap()
            );
        }

        #[test]
        fn metrics_invariant_under_class_permutation(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.random_range(2..=6);
            let cm = random_cm(&mut rng, m);
            let mut perm: Vec<usize> = (0..m).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let mut permuted = ConfusionMatrix::new(m);
            for r in 0..m {
                for c in 0..m {
                    permuted.counts[perm[r] * m + perm[c]] = cm.get(r, c);
                }
            }
            prop_assert!((balanced_accuracy(&cm).unwrap() - balanced_accuracy(&permuted).unwrap()).abs() < 1e-12);
            prop_assert!((macro_specificity(&cm).unwrap() - macro_specificity(&permuted).unwrap()).abs() < 1e-12);
            prop_assert!((macro_f1(&cm).unwrap() - macro_f1(&permuted).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn metrics_invariant_under_count_scaling(seed in 0u64..300, scale in 2u64..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.random_range(2..=6);
            let cm = random_cm(&mut rng, m);
            let mut scaled = ConfusionMatrix::new(m);
            for i in 0..m * m {
                scaled.counts[i] = cm.counts[i] * scale;
            }
            prop_assert!((balanced_accuracy(&cm).unwrap() - balanced_accuracy(&scaled).unwrap()).abs() < 1e-12);
            prop_assert!((macro_specificity(&cm).unwrap() - macro_specificity(&scaled).unwrap()).abs() < 1e-12);
            prop_assert!((macro_f1(&cm).unwrap() - macro_f1(&scaled).unwrap()).abs() < 1e-12);
        }
    }
}
