//! Classification metrics: per-class precision/recall/F1, micro and macro
//! averages, and confusion matrices.

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Metrics of one class on one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn f1_of(precision: f64, recall: f64) -> f64 {
    if precision == recall {
        // harmonic mean of equal values is that value, bit-exactly
        precision
    } else if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// A single-evaluation report over a fixed class table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub per_class: Vec<ClassMetrics>,
    pub micro: ClassMetrics,
    pub macro_avg: ClassMetrics,
    /// Class ids that never appear in `y_true`; their metrics read 0.
    pub absent_classes: Vec<usize>,
}

/// Standard per-class report plus micro (pooled) and macro (unweighted
/// mean) averages. Classes absent from `y_true` get zero metrics and are
/// flagged.
pub fn classification_report(
    y_true: &[usize],
    y_pred: &[usize],
    n_classes: usize,
) -> Result<Report, EvalError> {
    let confusion = confusion_matrix(y_true, y_pred, n_classes)?;
    let mut per_class = Vec::with_capacity(n_classes);
    let mut absent = Vec::new();
    let (mut tp_total, mut fp_total, mut fn_total) = (0u64, 0u64, 0u64);
    for c in 0..n_classes {
        let tp = confusion[c][c];
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = (0..n_classes).map(|r| confusion[r][c]).sum();
        let fp = predicted - tp;
        let fn_ = support - tp;
        tp_total += tp;
        fp_total += fp;
        fn_total += fn_;
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        if support == 0 {
            absent.push(c);
        }
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1: f1_of(precision, recall),
            support: support as usize,
        });
    }
    let micro_p = if tp_total + fp_total > 0 {
        tp_total as f64 / (tp_total + fp_total) as f64
    } else {
        0.0
    };
    let micro_r = if tp_total + fn_total > 0 {
        tp_total as f64 / (tp_total + fn_total) as f64
    } else {
        0.0
    };
    let micro = ClassMetrics {
        precision: micro_p,
        recall: micro_r,
        f1: f1_of(micro_p, micro_r),
        support: y_true.len(),
    };
    let k = n_classes as f64;
    let macro_avg = ClassMetrics {
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
        support: y_true.len(),
    };
    Ok(Report { per_class, micro, macro_avg, absent_classes: absent })
}

/// Cell `(i, j)` counts rows with true class `i` predicted as `j`.
pub fn confusion_matrix(
    y_true: &[usize],
    y_pred: &[usize],
    n_classes: usize,
) -> Result<Vec<Vec<u64>>, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch { a: y_true.len(), b: y_pred.len() });
    }
    if y_true.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        confusion[t][p] += 1;
    }
    Ok(confusion)
}

/// Mean and population standard deviation of a metric across evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction_is_all_ones() {
        let y = vec![0, 1, 2, 1, 0];
        let report = classification_report(&y, &y, 3).unwrap();
        for m in &report.per_class {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(report.micro.f1, 1.0);
        assert_eq!(report.macro_avg.f1, 1.0);
        let confusion = confusion_matrix(&y, &y, 3).unwrap();
        assert_eq!(confusion[0][0], 2);
        assert_eq!(confusion[1][1], 2);
        assert_eq!(confusion[2][2], 1);
    }

    #[test]
    fn hand_computed_binary_example() {
        // true: B B M M M / pred: B M M M M  (B = 0, M = 1)
        let y_true = vec![0, 0, 1, 1, 1];
        let y_pred = vec![0, 1, 1, 1, 1];
        let report = classification_report(&y_true, &y_pred, 2).unwrap();
        let b = report.per_class[0];
        assert!((b.precision - 1.0).abs() < 1e-9);
        assert!((b.recall - 0.5).abs() < 1e-9);
        assert!((b.f1 - 2.0 / 3.0).abs() < 1e-9);
        let m = report.per_class[1];
        assert!((m.precision - 0.75).abs() < 1e-9);
        assert!((m.recall - 1.0).abs() < 1e-9);
        assert!((m.f1 - 6.0 / 7.0).abs() < 1e-9);
        let confusion = confusion_matrix(&y_true, &y_pred, 2).unwrap();
        assert_eq!(confusion, vec![vec![1, 1], vec![0, 3]]);
    }

    #[test]
    fn absent_class_is_flagged_zero() {
        let report = classification_report(&[0, 0], &[0, 2], 3).unwrap();
        assert_eq!(report.absent_classes, vec![1, 2]);
        assert_eq!(report.per_class[1].f1, 0.0);
        assert_eq!(report.per_class[2].support, 0);
    }

    #[test]
    fn empty_and_mismatched_inputs_rejected() {
        assert!(matches!(confusion_matrix(&[], &[], 2), Err(EvalError::Empty)));
        assert!(matches!(
            confusion_matrix(&[0], &[0, 1], 2),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn mean_std_degenerate_cases() {
        let s = mean_std(&[0.5, 0.5, 0.5]);
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.std, 0.0);
        let s = mean_std(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
    }

    proptest! {
        /// micro precision = recall = F1 = accuracy on single-label tasks.
        #[test]
        fn micro_equals_accuracy(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)
        ) {
            let y_true: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let y_pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let report = classification_report(&y_true, &y_pred, 4).unwrap();
            let accuracy = y_true.iter().zip(&y_pred).filter(|(a, b)| a == b).count() as f64
                / y_true.len() as f64;
            prop_assert_eq!(report.micro.precision, accuracy);
            prop_assert_eq!(report.micro.recall, accuracy);
            prop_assert_eq!(report.micro.f1, accuracy);
        }

        /// row sums of the confusion matrix equal class supports.
        #[test]
        fn confusion_row_sums_are_supports(
            pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..40)
        ) {
            let y_true: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let y_pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let confusion = confusion_matrix(&y_true, &y_pred, 3).unwrap();
            for c in 0..3 {
                let support = y_true.iter().filter(|&&t| t == c).count() as u64;
                prop_assert_eq!(confusion[c].iter().sum::<u64>(), support);
            }
        }

        /// macro F1 lies between the extreme per-class F1 values.
        #[test]
        fn macro_f1_bounded_by_class_f1(
            pairs in proptest::collection::vec((0usize..3, 0usize..3), 3..40)
        ) {
            let y_true: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let y_pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let report = classification_report(&y_true, &y_pred, 3).unwrap();
            let f1s: Vec<f64> = report.per_class.iter().map(|m| m.f1).collect();
            let lo = f1s.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = f1s.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            prop_assert!(report.macro_avg.f1 >= lo - 1e-12);
            prop_assert!(report.macro_avg.f1 <= hi + 1e-12);
        }
    }
}
