//! Brute-force oracles for the curve metrics.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringlab_metrics::{
    precision_at_base_rate, pr_with_auc, roc_with_auc, tpr_at_fpr, ScoreSet,
};

fn concordance_auc(s: &ScoreSet) -> f64 {
    let mut twice: u128 = 0;
    let (mut p, mut n) = (0u128, 0u128);
    for (i, &li) in s.labels().iter().enumerate() {
        if li == 1 {
            p += 1;
        } else {
            n += 1;
        }
        for (j, &lj) in s.labels().iter().enumerate() {
            if li == 1 && lj == 0 {
                let (a, b) = (s.scores()[i], s.scores()[j]);
                if a > b {
                    twice += 2;
                } else if a == b {
                    twice += 1;
                }
            }
        }
    }
    twice as f64 / (2 * p * n) as f64
}

fn counts_at(s: &ScoreSet, thr: f64) -> (u64, u64) {
    let mut tp = 0;
    let mut fp = 0;
    for (&sc, &l) in s.scores().iter().zip(s.labels()) {
        if sc >= thr {
            if l == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    (tp, fp)
}

fn thresholds_desc(s: &ScoreSet) -> Vec<f64> {
    let mut t = s.scores().to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn enumerated_ap(s: &ScoreSet) -> f64 {
    let p = s.positives() as f64;
    let mut prev_tp = 0;
    let mut ap = 0.0;
    for thr in thresholds_desc(s) {
        let (tp, fp) = counts_at(s, thr);
        ap += (tp - prev_tp) as f64 / p * (tp as f64 / (tp + fp) as f64);
        prev_tp = tp;
    }
    ap
}

fn enumerated_tpr(s: &ScoreSet, fpr: f64) -> f64 {
    let (p, n) = (s.positives() as f64, s.negatives() as f64);
    let mut best = 0.0f64;
    for thr in thresholds_desc(s) {
        let (tp, fp) = counts_at(s, thr);
        if fp as f64 / n <= fpr {
            best = best.max(tp as f64 / p);
        }
    }
    best
}

fn random_set(rng: &mut ChaCha8Rng, n: usize) -> ScoreSet {
    loop {
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..12u8)) / 4.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let s = ScoreSet::new(scores, labels).unwrap();
        if s.positives() > 0 && s.negatives() > 0 {
            return s;
        }
    }
}

#[test]
fn curves_match_enumeration_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = rng.random_range(2..=50);
        let s = random_set(&mut rng, n);
        assert_eq!(roc_with_auc(&s).unwrap().auc, concordance_auc(&s));
        assert_eq!(pr_with_auc(&s).unwrap().auc, enumerated_ap(&s));
        for fpr in [0.0, 0.01, 0.1, 0.25, 0.5, 1.0] {
            assert_eq!(tpr_at_fpr(&s, fpr).unwrap(), enumerated_tpr(&s, fpr));
        }
    }
}

#[test]
fn random_balanced_pr_is_near_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 4000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let ap = pr_with_auc(&ScoreSet::new(scores, labels).unwrap()).unwrap().auc;
    assert!((ap - 0.5).abs() < 0.03, "{ap}");
}

#[test]
fn precision_matches_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let n: u64 = rng.random_range(2..=400);
        let pos = rng.random_range(1..n);
        let neg = n - pos;
        let tp = rng.random_range(0..=pos);
        let fp = rng.random_range(0..=neg);
        let got = precision_at_base_rate(tp as f64 / pos as f64, fp as f64 / neg as f64, pos as f64 / n as f64)
            .unwrap();
        if tp + fp == 0 {
            assert_eq!(got, None);
        } else {
            let counted = tp as f64 / (tp + fp) as f64;
            assert!((got.unwrap() - counted).abs() <= 1.0 / n as f64);
        }
    }
}

fn score_set_strategy() -> impl Strategy<Value = ScoreSet> {
    prop::collection::vec((0u8..20, 0u8..2), 2..40)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1 == 1) && v.iter().any(|x| x.1 == 0))
        .prop_map(|v| {
            let (s, l): (Vec<f64>, Vec<u8>) = v.into_iter().map(|(s, l)| (f64::from(s), l)).unzip();
            ScoreSet::new(s, l).unwrap()
        })
}

proptest! {
    #[test]
    fn tpr_at_fpr_is_monotone(s in score_set_strategy(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(tpr_at_fpr(&s, lo).unwrap() <= tpr_at_fpr(&s, hi).unwrap());
    }

    #[test]
    fn curves_are_permutation_invariant(s in score_set_strategy(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let t = ScoreSet::new(
            idx.iter().map(|&i| s.scores()[i]).collect(),
            idx.iter().map(|&i| s.labels()[i]).collect(),
        ).unwrap();
        prop_assert_eq!(roc_with_auc(&s).unwrap(), roc_with_auc(&t).unwrap());
        prop_assert_eq!(pr_with_auc(&s).unwrap(), pr_with_auc(&t).unwrap());
        prop_assert_eq!(tpr_at_fpr(&s, 0.1).unwrap(), tpr_at_fpr(&t, 0.1).unwrap());
    }

    #[test]
    fn monotone_rescaling_preserves_curves(s in score_set_strategy()) {
        let t = ScoreSet::new(s.scores().iter().map(|x| (x * 0.3).exp() - 2.0).collect(), s.labels().to_vec()).unwrap();
        prop_assert_eq!(roc_with_auc(&s).unwrap().auc, roc_with_auc(&t).unwrap().auc);
        prop_assert_eq!(pr_with_auc(&s).unwrap().auc, pr_with_auc(&t).unwrap().auc);
    }

    #[test]
    fn precision_monotonicity(tpr in 0.01f64..1.0, fpr in 0.01f64..1.0, pi in 0.01f64..0.99, d in 0.0f64..0.5) {
        let base = precision_at_base_rate(tpr, fpr, pi).unwrap().unwrap();
        let more_pi = precision_at_base_rate(tpr, fpr, (pi + d).min(1.0)).unwrap().unwrap();
        let more_tpr = precision_at_base_rate((tpr + d).min(1.0), fpr, pi).unwrap().unwrap();
        let more_fpr = precision_at_base_rate(tpr, (fpr + d).min(1.0), pi).unwrap().unwrap();
        prop_assert!(more_pi >= base - 1e-12);
        prop_assert!(more_tpr >= base - 1e-12);
        prop_assert!(more_fpr <= base + 1e-12);
    }
}
