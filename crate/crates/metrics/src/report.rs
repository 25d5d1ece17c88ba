use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{
    accuracy_at_threshold, base_rate_grid, pr_with_auc, precision_table, roc_with_auc,
    threshold_at_fpr, tpr_at_fpr, Curve, PrecisionRow, Result, ScoreSet,
};

/// Operating points used for the precision-vs-base-rate table.
pub const MIN_TPRS: [f64; 4] = [0.5, 0.75, 0.95, 0.99];

/// Everything reported for one experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub roc: Curve,
    pub pr: Curve,
    /// Accuracy with the threshold calibrated to 1% FPR.
    pub accuracy: f64,
    pub tpr_at_1pct_fpr: f64,
    pub precision_vs_base_rate: Vec<PrecisionRow>,
    pub quality_deltas: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn from_scores(s: &ScoreSet) -> Result<Self> {
        let roc = roc_with_auc(s)?;
        let pr = pr_with_auc(s)?;
        let thr = threshold_at_fpr(s, 0.01)?;
        let grid = base_rate_grid(1e-3, 0.5, 16);
        Ok(Self {
            precision_vs_base_rate: precision_table(&roc, &MIN_TPRS, &grid)?,
            accuracy: accuracy_at_threshold(s, thr)?,
            tpr_at_1pct_fpr: tpr_at_fpr(s, 0.01)?,
            roc,
            pr,
            quality_deltas: BTreeMap::new(),
        })
    }

    pub fn roc_auc(&self) -> f64 {
        self.roc.auc
    }

    pub fn pr_auc(&self) -> f64 {
        self.pr.auc
    }

    pub fn curve_csv(curve: &Curve, x: &str, y: &str) -> String {
        let mut out = format!("{x},{y}\n");
        for (a, b) in &curve.points {
            let _ = writeln!(out, "{a:.6},{b:.6}");
        }
        out
    }

    pub fn base_rate_csv(&self) -> String {
        let mut out = String::from("min_tpr,tpr,fpr,base_rate,precision\n");
        for r in &self.precision_vs_base_rate {
            let p = r.precision.map_or_else(|| "undefined".to_string(), |p| format!("{p:.6}"));
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{p}", r.min_tpr, r.tpr, r.fpr, r.base_rate);
        }
        out
    }
}

/// Mean and sample standard deviation of a metric over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> SeedSummary {
    let n = values.len();
    if n == 0 {
        return SeedSummary { mean: f64::NAN, std: f64::NAN, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    SeedSummary { mean, std, n }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_on_separable_scores() {
        let s = ScoreSet::from_classes(&[5.0, 6.0, 7.0], &[1.0, 2.0, 3.0]).unwrap();
        let r = MetricsReport::from_scores(&s).unwrap();
        assert_eq!(r.roc_auc(), 1.0);
        assert_eq!(r.pr_auc(), 1.0);
        assert_eq!(r.tpr_at_1pct_fpr, 1.0);
        assert_eq!(r.accuracy, 1.0);
        assert!(r.base_rate_csv().lines().count() > 1);
    }

    #[test]
    fn mean_std_sample() {
        let s = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[4.0]).std, 0.0);
    }
}
