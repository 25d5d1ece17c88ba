use serde::{Deserialize, Serialize};

use crate::{Curve, MetricsError, Result};

/// Precision of a detector with the given operating point when a fraction
/// `base_rate` of the population is watermarked.
///
/// Returns `None` when nothing is ever flagged (`pi * tpr + (1 - pi) * fpr == 0`).
pub fn precision_at_base_rate(tpr: f64, fpr: f64, base_rate: f64) -> Result<Option<f64>> {
    for (name, v) in [("tpr", tpr), ("fpr", fpr), ("base rate", base_rate)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(MetricsError::InvalidArgument(format!("{name} {v} outside [0, 1]")));
        }
    }
    let flagged_pos = base_rate * tpr;
    let denom = flagged_pos + (1.0 - base_rate) * fpr;
    if denom <= 0.0 {
        return Ok(None);
    }
    Ok(Some(flagged_pos / denom))
}

/// `count` base rates spaced logarithmically over `[lo, hi]`.
pub fn base_rate_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count)
                .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub min_tpr: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// The ROC point with the lowest FPR among those reaching `min_tpr`.
pub fn operating_point_for_min_tpr(roc: &Curve, min_tpr: f64) -> Option<OperatingPoint> {
    roc.points
        .iter()
        .filter(|(_, tpr)| *tpr >= min_tpr)
        .min_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)))
        .map(|&(fpr, tpr)| OperatingPoint { min_tpr, tpr, fpr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRow {
    pub min_tpr: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub base_rate: f64,
    pub precision: Option<f64>,
}

/// Precision-versus-base-rate table for each requested minimum TPR.
pub fn precision_table(roc: &Curve, min_tprs: &[f64], base_rates: &[f64]) -> Result<Vec<PrecisionRow>> {
    let mut rows = Vec::new();
    for &min_tpr in min_tprs {
        let Some(op) = operating_point_for_min_tpr(roc, min_tpr) else {
            continue;
        };
        for &pi in base_rates {
            rows.push(PrecisionRow {
                min_tpr,
                tpr: op.tpr,
                fpr: op.fpr,
                base_rate: pi,
                precision: precision_at_base_rate(op.tpr, op.fpr, pi)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_operating_point_balanced() {
        let p = precision_at_base_rate(0.968, 0.01, 0.5).unwrap().unwrap();
        assert!((p - 0.9898).abs() < 5e-5, "{p}");
    }

    #[test]
    fn paper_operating_point_rare() {
        let p = precision_at_base_rate(0.968, 0.01, 0.01).unwrap().unwrap();
        assert!((p - 0.494).abs() < 5e-4, "{p}");
    }

    #[test]
    fn zero_fpr_is_perfect_precision() {
        for pi in [1e-3, 0.1, 0.5, 1.0] {
            assert_eq!(precision_at_base_rate(0.3, 0.0, pi).unwrap(), Some(1.0));
        }
    }

    #[test]
    fn zero_denominator_is_undefined() {
        assert_eq!(precision_at_base_rate(0.0, 0.0, 0.5).unwrap(), None);
        assert_eq!(precision_at_base_rate(0.9, 0.0, 0.0).unwrap(), None);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(precision_at_base_rate(1.1, 0.0, 0.5).is_err());
    }

    #[test]
    fn grid_endpoints() {
        let g = base_rate_grid(1e-3, 0.5, 10);
        assert_eq!(g.len(), 10);
        assert!((g[0] - 1e-3).abs() < 1e-15);
        assert!((g[9] - 0.5).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn operating_point_picks_lowest_fpr() {
        let roc = Curve {
            points: vec![(0.0, 0.0), (0.0, 0.4), (0.1, 0.6), (0.3, 0.96), (1.0, 1.0)],
            auc: 0.0,
        };
        let op = operating_point_for_min_tpr(&roc, 0.5).unwrap();
        assert_eq!((op.fpr, op.tpr), (0.1, 0.6));
        let op = operating_point_for_min_tpr(&roc, 0.95).unwrap();
        assert_eq!((op.fpr, op.tpr), (0.3, 0.96));
    }
}
