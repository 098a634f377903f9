use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// How MAE and RMSE are scaled; written into every report.
pub const SEVERITY_NORMALIZATION: &str =
    "severity: expected score sum_i p_i*score_i; M, R = 100 * error / (score_max - score_min)";

/// Test-set metrics of one evaluation, all in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `None` when the severity score range is degenerate.
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy, macro-F1 and range-normalized severity errors.
///
/// `true_scores[i]` is the clinical score of clip `i`; `level_scores` maps
/// severity-head outputs to scores.
pub fn compute_metrics(
    cls_probs: &Matrix,
    labels: &[usize],
    sev_probs: &Matrix,
    true_scores: &[f64],
    level_scores: &[f64],
) -> Result<MetricsReport> {
    let n = labels.len();
    if cls_probs.rows() != n || sev_probs.rows() != n || true_scores.len() != n {
        return Err(Error::dim(
            "prediction rows",
            n,
            format!("{}/{}/{}", cls_probs.rows(), sev_probs.rows(), true_scores.len()),
        ));
    }
    if n == 0 {
        return Err(Error::Config("no predictions to score".into()));
    }
    if sev_probs.cols() != level_scores.len() {
        return Err(Error::dim("severity levels", level_scores.len(), sev_probs.cols()));
    }
    let k = cls_probs.cols();
    let mut confusion = vec![vec![0usize; k]; k];
    for (row, &y) in cls_probs.row_iter().zip(labels) {
        if y >= k {
            return Err(Error::Label(format!("class {y} out of range for {k} classes")));
        }
        confusion[y][argmax(row)] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let accuracy = 100.0 * correct as f64 / n as f64;
    let f1s = (0..k).map(|c| {
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        if tp == 0.0 {
            0.0
        } else {
            let p = tp / predicted as f64;
            let r = tp / actual as f64;
            2.0 * p * r / (p + r)
        }
    });
    let macro_f1 = 100.0 * f1s.sum::<f64>() / k as f64;

    let lo = level_scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = level_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mae, rmse) = if hi > lo {
        let range = hi - lo;
        let (mut abs, mut sq) = (0.0, 0.0);
        for (row, &s) in sev_probs.row_iter().zip(true_scores) {
            let expected: f64 = row.iter().zip(level_scores).map(|(p, v)| p * v).sum();
            abs += (expected - s).abs();
            sq += (expected - s).powi(2);
        }
        (
            Some(100.0 * abs / n as f64 / range),
            Some(100.0 * (sq / n as f64).sqrt() / range),
        )
    } else {
        (None, None)
    };
    Ok(MetricsReport {
        accuracy,
        macro_f1,
        mae,
        rmse,
        confusion,
        n,
    })
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary { mean, std }
}

/// Mean ± std of each metric over a set of reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub accuracy: Summary,
    pub macro_f1: Summary,
    pub mae: Option<Summary>,
    pub rmse: Option<Summary>,
    pub runs: usize,
    /// Confusion counts summed over runs.
    pub confusion: Vec<Vec<usize>>,
}

pub fn aggregate(reports: &[&MetricsReport]) -> Result<AggregateMetrics> {
    let first = reports.first().ok_or_else(|| Error::Config("nothing to aggregate".into()))?;
    let k = first.confusion.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for r in reports {
        if r.confusion.len() != k {
            return Err(Error::Label(format!(
                "cannot aggregate reports with {} and {} classes",
                k,
                r.confusion.len()
            )));
        }
        for (acc, row) in confusion.iter_mut().zip(&r.confusion) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    let col = |f: fn(&MetricsReport) -> f64| summarize(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
    let opt = |f: fn(&MetricsReport) -> Option<f64>| {
        reports
            .iter()
            .map(|r| f(r))
            .collect::<Option<Vec<_>>>()
            .map(|v| summarize(&v))
    };
    Ok(AggregateMetrics {
        accuracy: col(|r| r.accuracy),
        macro_f1: col(|r| r.macro_f1),
        mae: opt(|r| r.mae),
        rmse: opt(|r| r.rmse),
        runs: reports.len(),
        confusion,
    })
}

/// Confusion matrix as an aligned text grid.
pub fn render_confusion(confusion: &[Vec<usize>], labels: &[String]) -> String {
    let width = confusion
        .iter()
        .flatten()
        .map(|v| v.to_string().len())
        .chain(labels.iter().map(String::len))
        .max()
        .unwrap_or(1)
        .max(4);
    let mut out = format!("{:>width$}", "true\\pred");
    for l in labels {
        out.push_str(&format!(" {l:>width$}"));
    }
    out.push('\n');
    for (l, row) in labels.iter().zip(confusion) {
        out.push_str(&format!("{:>w$}", l, w = width.max(9)));
        for v in row {
            out.push_str(&format!(" {v:>width$}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(rows: &[usize], k: usize) -> Matrix {
        let mut m = Matrix::zeros(rows.len(), k);
        for (r, &c) in rows.iter().enumerate() {
            m[(r, c)] = 1.0;
        }
        m
    }

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 1];
        let sev = [0, 2, 1, 3];
        let scores = [0.0, 1.0, 2.0, 3.0];
        let truth: Vec<f64> = sev.iter().map(|&s| scores[s]).collect();
        let m = compute_metrics(&one_hot(&labels, 3), &labels, &one_hot(&sev, 4), &truth, &scores).unwrap();
        assert_eq!((m.accuracy, m.macro_f1, m.mae, m.rmse), (100.0, 100.0, Some(0.0), Some(0.0)));
        for (c, row) in m.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == c).count());
        }
    }

    #[test]
    fn all_class_zero_half_half() {
        let labels = [0, 0, 1, 1];
        let sev = one_hot(&[0, 0, 0, 0], 2);
        let m = compute_metrics(&one_hot(&[0, 0, 0, 0], 2), &labels, &sev, &[0.0; 4], &[0.0, 1.0]).unwrap();
        assert_eq!(m.accuracy, 50.0);
        // Per-class F1: 2/3 and 0.
        assert!((m.macro_f1 - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_severity_around_middle_score() {
        let sev = Matrix::filled(3, 3, 1.0 / 3.0);
        let m = compute_metrics(&one_hot(&[0, 0, 0], 2), &[0, 0, 0], &sev, &[2.0; 3], &[1.0, 2.0, 3.0]).unwrap();
        assert!(m.mae.unwrap().abs() < 1e-12);
        assert!(m.rmse.unwrap().abs() < 1e-12);
    }

    #[test]
    fn degenerate_range_is_not_applicable() {
        let m = compute_metrics(&one_hot(&[0], 2), &[0], &one_hot(&[0], 2), &[1.0], &[1.0, 1.0]).unwrap();
        assert_eq!((m.mae, m.rmse), (None, None));
    }

    #[test]
    fn aggregate_recomputes_from_runs() {
        let mk = |a: f64| MetricsReport {
            accuracy: a,
            macro_f1: a / 2.0,
            mae: Some(1.0),
            rmse: None,
            confusion: vec![vec![1, 0], vec![0, 1]],
            n: 2,
        };
        let (a, b) = (mk(80.0), mk(90.0));
        let agg = aggregate(&[&a, &b]).unwrap();
        assert_eq!(agg.accuracy.mean, 85.0);
        assert!((agg.accuracy.std - 50f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg.mae.unwrap().std, 0.0);
        assert!(agg.rmse.is_none());
        assert_eq!(agg.confusion, vec![vec![2, 0], vec![0, 2]]);
        let same = aggregate(&[&a, &a]).unwrap();
        assert_eq!(same.accuracy.std, 0.0);
    }
}
