//! Detector evaluation metrics.
//!
//! Scores follow one convention everywhere: higher means "more watermark-like".
//! A sample is flagged as positive at threshold `thr` when `score >= thr`.

mod base_rate;
mod curves;
mod report;
mod scores;

pub use base_rate::{
    base_rate_grid, operating_point_for_min_tpr, precision_at_base_rate, precision_table,
    OperatingPoint, PrecisionRow,
};
pub use curves::{
    accuracy_at_threshold, pr_with_auc, roc_with_auc, threshold_at_fpr, tpr_at_fpr, Curve,
};
pub use report::{mean_std, MetricsReport, SeedSummary};
pub use scores::ScoreSet;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;
