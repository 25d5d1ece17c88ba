use serde::{Deserialize, Serialize};

use crate::{MetricsError, Result};

/// Detector scores paired with ground-truth labels (1 = watermarked).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(MetricsError::InvalidArgument(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(MetricsError::InvalidArgument(format!("label {bad} is not 0 or 1")));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(MetricsError::InvalidArgument("NaN score".into()));
        }
        Ok(Self { scores, labels })
    }

    /// Builds a set from separate positive and negative score lists.
    pub fn from_classes(positives: &[f64], negatives: &[f64]) -> Result<Self> {
        let scores = positives.iter().chain(negatives).copied().collect();
        let labels = std::iter::repeat_n(1, positives.len())
            .chain(std::iter::repeat_n(0, negatives.len()))
            .collect();
        Self::new(scores, labels)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub(crate) fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (p, n) = (self.positives(), self.negatives());
        if p == 0 || n == 0 {
            return Err(MetricsError::InvalidArgument(format!(
                "both classes required (positives={p}, negatives={n})"
            )));
        }
        Ok((p, n))
    }

    /// Groups of (true positives, false positives) added at each distinct score,
    /// visited from the highest score to the lowest. Ties share one group.
    pub(crate) fn descending_groups(&self) -> Vec<(f64, u64, u64)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(f64, u64, u64)> = Vec::new();
        for i in order {
            let s = self.scores[i];
            let (dtp, dfp) = if self.labels[i] == 1 { (1, 0) } else { (0, 1) };
            match groups.last_mut() {
                Some(g) if g.0 == s => {
                    g.1 += dtp;
                    g.2 += dfp;
                }
                _ => groups.push((s, dtp, dfp)),
            }
        }
        groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_lengths() {
        assert!(ScoreSet::new(vec![0.1, 0.2], vec![1]).is_err());
    }

    #[test]
    fn rejects_bad_labels_and_nan() {
        assert!(ScoreSet::new(vec![0.1], vec![2]).is_err());
        assert!(ScoreSet::new(vec![f64::NAN], vec![1]).is_err());
    }

    #[test]
    fn groups_merge_ties() {
        let s = ScoreSet::new(vec![0.5, 0.5, 0.9, 0.1], vec![1, 0, 1, 0]).unwrap();
        assert_eq!(s.descending_groups(), vec![(0.9, 1, 0), (0.5, 1, 1), (0.1, 0, 1)]);
    }
}
