use serde::{Deserialize, Serialize};

use crate::{MetricsError, Result, ScoreSet};

/// A curve as a list of `(x, y)` points plus the area under it.
///
/// ROC points are `(fpr, tpr)`; PR points are `(recall, precision)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC curve over every distinct score, area by the trapezoid rule.
///
/// Tied scores form a single threshold step, so the area equals the pairwise
/// concordance probability with half credit for ties. The area is accumulated
/// in integer units of `1 / (2 * P * N)` and divided once.
pub fn roc_with_auc(s: &ScoreSet) -> Result<Curve> {
    let (p, n) = s.require_both_classes()?;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    for (_, dtp, dfp) in s.descending_groups() {
        let (prev_tp, prev_fp) = (tp, fp);
        tp += dtp;
        fp += dfp;
        twice_area += u128::from(fp - prev_fp) * u128::from(tp + prev_tp);
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    let auc = twice_area as f64 / (2 * p as u128 * n as u128) as f64;
    Ok(Curve { points, auc })
}

/// Precision-recall curve with right-continuous step interpolation.
///
/// The area is average precision: `sum_k (R_k - R_{k-1}) * P_k` over distinct
/// thresholds from high to low. No linear interpolation between points.
pub fn pr_with_auc(s: &ScoreSet) -> Result<Curve> {
    let (p, _) = s.require_both_classes()?;
    let mut points = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut auc = 0.0;
    for (_, dtp, dfp) in s.descending_groups() {
        let prev_tp = tp;
        tp += dtp;
        fp += dfp;
        let precision = tp as f64 / (tp + fp) as f64;
        auc += (tp - prev_tp) as f64 / p as f64 * precision;
        points.push((tp as f64 / p as f64, precision));
    }
    Ok(Curve { points, auc })
}

/// Largest TPR over thresholds whose empirical FPR is at most `fpr`.
///
/// The "flag nothing" threshold (TPR = FPR = 0) is always admissible.
pub fn tpr_at_fpr(s: &ScoreSet, fpr: f64) -> Result<f64> {
    Ok(operating_threshold(s, fpr)?.1)
}

/// Score threshold realising [`tpr_at_fpr`]: samples with `score >= threshold`
/// are flagged. Returns `f64::INFINITY` when no finite threshold is admissible.
pub fn threshold_at_fpr(s: &ScoreSet, fpr: f64) -> Result<f64> {
    Ok(operating_threshold(s, fpr)?.0)
}

fn operating_threshold(s: &ScoreSet, fpr: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&fpr) {
        return Err(MetricsError::InvalidArgument(format!("fpr {fpr} outside [0, 1]")));
    }
    let (p, n) = s.require_both_classes()?;
    let mut best = (f64::INFINITY, 0.0);
    let (mut tp, mut fp) = (0u64, 0u64);
    for (score, dtp, dfp) in s.descending_groups() {
        tp += dtp;
        fp += dfp;
        if fp as f64 / n as f64 <= fpr {
            let tpr = tp as f64 / p as f64;
            if tpr >= best.1 {
                best = (score, tpr);
            }
        }
    }
    Ok(best)
}

/// Fraction of samples classified correctly when `score >= threshold` is flagged.
pub fn accuracy_at_threshold(s: &ScoreSet, threshold: f64) -> Result<f64> {
    if s.is_empty() {
        return Err(MetricsError::InvalidArgument("empty score set".into()));
    }
    let correct = s
        .scores()
        .iter()
        .zip(s.labels())
        .filter(|(&sc, &l)| (sc >= threshold) == (l == 1))
        .count();
    Ok(correct as f64 / s.len() as f64)
}
