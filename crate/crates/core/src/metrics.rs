//! AUC, recall/precision/F-beta, threshold sweeps and score histograms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney statistic with midranks:
/// `P(s+ > s-) + P(s+ = s-)/2`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub recall: f64,
    pub precision: f64,
    pub fbeta: f64,
    pub beta: f64,
    /// Share of fraud samples predicted fraud (equals recall).
    pub fraud_accuracy: f64,
    /// Share of normal samples predicted normal.
    pub normal_accuracy: f64,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Names of metrics whose denominator was zero (reported as 0).
    pub degenerate: Vec<String>,
}

fn ratio(num: usize, den: usize, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(1 + b^2) P R / (b^2 P + R)`, or 0 when the denominator vanishes.
pub fn fbeta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

/// Confusion-based metrics with the rule "fraud iff score >= threshold".
pub fn classification_metrics(scores: &[f64], labels: &[u8], threshold: f64, beta: f64) -> Result<Metrics> {
    check(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let auc = auc(scores, labels).ok();
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(confusion_metrics(tp, fp, tn, fn_, threshold, beta, auc))
}

fn confusion_metrics(
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
    threshold: f64,
    beta: f64,
    auc: Option<f64>,
) -> Metrics {
    let mut flags = Vec::new();
    let recall = ratio(tp, tp + fn_, "recall", &mut flags);
    let precision = ratio(tp, tp + fp, "precision", &mut flags);
    let normal_accuracy = ratio(tn, tn + fp, "normal_accuracy", &mut flags);
    let f = fbeta(precision, recall, beta);
    if f == 0.0 && precision + recall == 0.0 {
        flags.push("fbeta".into());
    }
    Metrics {
        auc,
        recall,
        precision,
        fbeta: f,
        beta,
        fraud_accuracy: recall,
        normal_accuracy,
        threshold,
        tp,
        fp,
        tn,
        fn_,
        degenerate: flags,
    }
}

/// Grid thresholds `0.00, 0.01, ..., 1.00`.
pub fn threshold_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdCurve {
    pub rows: Vec<Metrics>,
}

/// One F2 metrics row per grid threshold.
pub fn threshold_sweep(scores: &[f64], labels: &[u8]) -> Result<ThresholdCurve> {
    let auc_v = auc(scores, labels)?;
    let rows = threshold_grid()
        .into_iter()
        .map(|t| {
            let mut m = classification_metrics(scores, labels, t, 2.0)?;
            m.auc = Some(auc_v);
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ThresholdCurve { rows })
}

impl ThresholdCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        w.write_record([
            "threshold",
            "fraud_accuracy",
            "normal_accuracy",
            "precision",
            "f2",
            "tp",
            "fp",
            "tn",
            "fn",
        ])?;
        for m in &self.rows {
            w.write_record([
                format!("{:.2}", m.threshold),
                m.fraud_accuracy.to_string(),
                m.normal_accuracy.to_string(),
                m.precision.to_string(),
                m.fbeta.to_string(),
                m.tp.to_string(),
                m.fp.to_string(),
                m.tn.to_string(),
                m.fn_.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdPolicy {
    /// Grid threshold with the largest F2; ties go to the smallest.
    MaxF2,
    Manual {
        value: f64,
    },
}

pub fn select_threshold(curve: &ThresholdCurve, policy: ThresholdPolicy) -> Result<f64> {
    match policy {
        ThresholdPolicy::Manual { value } => Ok(value),
        ThresholdPolicy::MaxF2 => {
            let mut best: Option<&Metrics> = None;
            for m in &curve.rows {
                if best.is_none_or(|b| m.fbeta > b.fbeta) {
                    best = Some(m);
                }
            }
            best.map(|m| m.threshold)
                .ok_or_else(|| Error::invalid("empty threshold curve"))
        }
    }
}

/// Counts per class over 50 equal-width bins of [0, 1]; the last bin is
/// closed.
pub fn probability_histogram(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, usize, usize)>> {
    check(scores, labels)?;
    const BINS: usize = 50;
    let mut counts = vec![(0usize, 0usize); BINS];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = ((s.clamp(0.0, 1.0) * BINS as f64) as usize).min(BINS - 1);
        if l == 1 {
            counts[b].1 += 1;
        } else {
            counts[b].0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, (neg, pos))| (i as f64 / BINS as f64, (i + 1) as f64 / BINS as f64, neg, pos))
        .collect())
}

pub fn write_histogram_csv(path: &Path, scores: &[f64], labels: &[u8]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    w.write_record(["bin_lo", "bin_hi", "normal", "fraud"])?;
    for (lo, hi, neg, pos) in probability_histogram(scores, labels)? {
        w.write_record([format!("{lo:.2}"), format!("{hi:.2}"), neg.to_string(), pos.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
