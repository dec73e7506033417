//! F1-frame scoring, threshold tuning and label statistics.

use serde::Serialize;

use crate::error::{Error, Result};

/// Confusion counts and scores of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
}

impl ClassReport {
    fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize, threshold: f64) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        // equal to 2PR/(P+R), but exact for equal count ratios so grid ties stay ties
        let f1 = if tp == 0 { 0.0 } else { ratio(2 * tp, 2 * tp + fp + fn_) };
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub macro_f1: f64,
}

fn check_shapes(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::dim(
            "f1_frame",
            format!("{} score rows, {} label rows", scores.len(), labels.len()),
        ));
    }
    let n = labels.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != n) || labels.iter().any(|r| r.len() != n) {
        return Err(Error::dim("f1_frame", "ragged score or label rows"));
    }
    Ok(n)
}

fn class_report(scores: &[Vec<f64>], labels: &[Vec<u8>], j: usize, tau: f64) -> ClassReport {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (s, y) in scores.iter().zip(labels) {
        match (s[j] >= tau, y[j] == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    ClassReport::from_counts(tp, fp, fn_, tn, tau)
}

/// Per-class F1 with the decision rule `score ≥ τ_j`, plus the macro average.
pub fn f1_frame(scores: &[Vec<f64>], labels: &[Vec<u8>], thresholds: &[f64]) -> Result<EvalReport> {
    let n = check_shapes(scores, labels)?;
    if thresholds.len() != n {
        return Err(Error::dim("f1_frame", format!("{} thresholds for {n} classes", thresholds.len())));
    }
    let classes: Vec<ClassReport> = (0..n)
        .map(|j| class_report(scores, labels, j, thresholds[j]))
        .collect();
    let macro_f1 = if n == 0 {
        0.0
    } else {
        classes.iter().map(|c| c.f1).sum::<f64>() / n as f64
    };
    Ok(EvalReport { classes, macro_f1 })
}

/// `0.05, 0.10, …, 0.95`.
pub fn default_grid() -> Vec<f64> {
    (1..20).map(|k| k as f64 / 20.0).collect()
}

/// Per class, the smallest grid value that maximizes F1.
pub fn tune_thresholds(scores: &[Vec<f64>], labels: &[Vec<u8>], grid: &[f64]) -> Result<Vec<f64>> {
    let n = check_shapes(scores, labels)?;
    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::domain("tune_thresholds", "grid must be non-empty with values in (0, 1)"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((0..n)
        .map(|j| {
            let mut best = (f64::NEG_INFINITY, sorted[0]);
            for &tau in &sorted {
                let f1 = class_report(scores, labels, j, tau).f1;
                if f1 > best.0 {
                    best = (f1, tau);
                }
            }
            best.1
        })
        .collect())
}

/// Pearson correlation between label columns. Constant columns correlate 0 with
/// everything else; the diagonal is always 1.
pub fn au_correlation_matrix(labels: &[Vec<u8>]) -> Result<Vec<Vec<f64>>> {
    if labels.len() < 2 {
        return Err(Error::Dataset("correlation needs at least two samples".into()));
    }
    let n = labels[0].len();
    if labels.iter().any(|r| r.len() != n) {
        return Err(Error::dim("au_correlation_matrix", "ragged label rows"));
    }
    let m = labels.len() as f64;
    let mean: Vec<f64> = (0..n).map(|j| labels.iter().map(|r| r[j] as f64).sum::<f64>() / m).collect();
    let mut cov = vec![vec![0.0; n]; n];
    for r in labels {
        for a in 0..n {
            let da = r[a] as f64 - mean[a];
            for b in 0..n {
                cov[a][b] += da * (r[b] as f64 - mean[b]);
            }
        }
    }
    Ok((0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    if a == b {
                        1.0
                    } else if cov[a][a] == 0.0 || cov[b][b] == 0.0 {
                        0.0
                    } else {
                        cov[a][b] / (cov[a][a] * cov[b][b]).sqrt()
                    }
                })
                .collect()
        })
        .collect())
}

/// Mean active labels per sample and that mean over the label count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelStats {
    pub cardinality: f64,
    pub density: f64,
}

pub fn label_stats(labels: &[Vec<u8>]) -> Result<LabelStats> {
    let n = labels.first().map(Vec::len).ok_or_else(|| Error::Dataset("label statistics need a sample".into()))?;
    if n == 0 || labels.iter().any(|r| r.len() != n) {
        return Err(Error::dim("label_stats", "empty or ragged label rows"));
    }
    let cardinality = labels.iter().map(|r| r.iter().map(|&y| y as f64).sum::<f64>()).sum::<f64>() / labels.len() as f64;
    Ok(LabelStats {
        cardinality,
        density: cardinality / n as f64,
    })
}
