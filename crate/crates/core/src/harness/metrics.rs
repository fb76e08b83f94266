//! Ranking and threshold metrics over anomaly scores.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

/// Confusion counts with anomalous as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at_threshold(scores: &[f64], labels: &[Label], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (s, l) in scores.iter().zip(labels) {
            match (*s >= threshold, l.is_anomalous()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub counts: Confusion,
    /// Set when precision + recall = 0 and F1 was defined as 0.
    #[serde(default)]
    pub f1_undefined: bool,
}

fn check_inputs(scores: &[f64], labels: &[Label]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::validation("scores must be finite"));
    }
    Ok(())
}

fn has_both_classes(labels: &[Label]) -> bool {
    labels.iter().any(|l| l.is_anomalous()) && labels.iter().any(|l| !l.is_anomalous())
}

/// ROC-AUC in Mann–Whitney form: the probability that an anomalous score
/// exceeds a normal one, ties counting one half. Computed from mid-ranks.
pub fn compute_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    check_inputs(scores, labels)?;
    if !has_both_classes(labels) {
        return Err(Error::validation("AUC needs both normal and anomalous samples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block shares the mean rank
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k].is_anomalous() {
                rank_sum_pos += mid_rank;
            }
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|l| l.is_anomalous()).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Threshold choice on the calibration split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub f1: f64,
    /// True when the data could not support the F1 rule and the median or
    /// the sole score was used instead.
    pub fallback: bool,
}

/// Picks the F1-maximizing threshold among midpoints of adjacent distinct
/// scores; ties go to the lowest threshold.
pub fn calibrate_threshold(scores: &[f64], labels: &[Label]) -> Result<Calibration> {
    check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::validation("calibration set is empty"));
    }
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    if !has_both_classes(labels) {
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        log::warn!("calibration split has a single class; using the median score as threshold");
        return Ok(Calibration {
            threshold: median,
            f1: Confusion::at_threshold(scores, labels, median).f1(),
            fallback: true,
        });
    }
    sorted.dedup();
    if sorted.len() == 1 {
        return Ok(Calibration {
            threshold: sorted[0],
            f1: Confusion::at_threshold(scores, labels, sorted[0]).f1(),
            fallback: true,
        });
    }

    // Sweep candidates in ascending order, moving samples from predicted
    // anomalous to predicted normal as the threshold passes them.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|l| l.is_anomalous()).count();
    let mut c = Confusion {
        tp: n_pos,
        fp: labels.len() - n_pos,
        tn: 0,
        fn_: 0,
    };
    let mut best = Calibration {
        threshold: f64::NAN,
        f1: -1.0,
        fallback: false,
    };
    let mut k = 0;
    for pair in sorted.windows(2) {
        while k < order.len() && scores[order[k]] <= pair[0] {
            if labels[order[k]].is_anomalous() {
                c.tp -= 1;
                c.fn_ += 1;
            } else {
                c.fp -= 1;
                c.tn += 1;
            }
            k += 1;
        }
        let f1 = c.f1();
        if f1 > best.f1 {
            best = Calibration {
                threshold: (pair[0] + pair[1]) / 2.0,
                f1,
                fallback: false,
            };
        }
    }
    Ok(best)
}

/// Test-split metrics at a fixed threshold; `score ≥ threshold` is anomalous.
pub fn compute_metrics(scores: &[f64], labels: &[Label], threshold: f64) -> Result<MetricsRecord> {
    let auc = compute_auc(scores, labels)?;
    let counts = Confusion::at_threshold(scores, labels, threshold);
    let (precision, recall) = (counts.precision(), counts.recall());
    let f1_undefined = precision + recall == 0.0;
    if f1_undefined {
        log::warn!("precision and recall are both zero at threshold {threshold}; F1 set to 0");
    }
    Ok(MetricsRecord {
        auc,
        f1: counts.f1(),
        precision,
        recall,
        threshold,
        counts,
        f1_undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use Label::{Anomalous as A, Normal as N};

    #[test]
    fn auc_small_cases() {
        assert_eq!(compute_auc(&[1.0, 2.0, 3.0, 4.0], &[N, N, A, A]).unwrap(), 1.0);
        assert_eq!(compute_auc(&[1.0, 3.0, 2.0, 4.0], &[N, N, A, A]).unwrap(), 0.75);
        assert_eq!(compute_auc(&[1.0, 1.0], &[N, A]).unwrap(), 0.5);
        assert!(compute_auc(&[1.0, 2.0], &[N, N]).is_err());
        assert!(compute_auc(&[1.0, f64::NAN], &[N, A]).is_err());
    }

    #[test]
    fn calibration_midpoint() {
        let c = calibrate_threshold(&[0.0, 0.0, 1.0, 1.0], &[N, N, A, A]).unwrap();
        assert_eq!(c.threshold, 0.5);
        assert_eq!(c.f1, 1.0);
        assert!(!c.fallback);
    }

    #[test]
    fn calibration_single_class_falls_back_to_median() {
        let c = calibrate_threshold(&[3.0, 1.0, 2.0], &[N, N, N]).unwrap();
        assert!(c.fallback);
        assert_eq!(c.threshold, 2.0);
    }

    #[test]
    fn confusion_arithmetic() {
        let c = Confusion { tp: 3, fp: 1, tn: 5, fn_: 1 };
        assert_abs_diff_eq!(c.precision(), 0.75);
        assert_abs_diff_eq!(c.recall(), 0.75);
        assert_abs_diff_eq!(c.f1(), 0.75);
        let c = Confusion { tp: 39, fp: 1, tn: 39, fn_: 1 };
        assert_abs_diff_eq!(c.precision(), 0.975);
        assert_abs_diff_eq!(c.recall(), 0.975);
        assert_abs_diff_eq!(c.f1(), 0.975, epsilon = 1e-15);
    }

    #[test]
    fn metrics_edge_cases() {
        let m = compute_metrics(&[0.0, 1.0], &[N, A], 0.5).unwrap();
        assert_eq!((m.auc, m.f1, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));
        let m = compute_metrics(&[0.0, 1.0], &[N, A], 10.0).unwrap();
        assert_eq!((m.recall, m.f1), (0.0, 0.0));
        assert!(m.f1_undefined);
    }
}
