//! Classification and correlation metrics.
//!
//! Zero-denominator cases return 0 by convention, matching common GLUE
//! tooling. Rank correlation uses average ranks and then correlates the
//! ranks, which stays correct under ties (the plain rank-difference formula
//! assumes none).

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum_by;

/// Binary confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Tally predictions against labels, class 1 positive.
    pub fn from_binary(pred: &[usize], truth: &[usize]) -> Result<ConfusionCounts> {
        if pred.len() != truth.len() || pred.is_empty() {
            return Err(Error::Contract(format!(
                "need equal nonempty prediction/label lists, got {} and {}",
                pred.len(),
                truth.len()
            )));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (1, 1) => c.tp += 1,
                (0, 0) => c.tn += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => {
                    return Err(Error::Contract(format!(
                        "binary confusion counts got classes {p}/{t}"
                    )))
                }
            }
        }
        Ok(c)
    }
}

/// Matthews correlation coefficient; any zero factor in the denominator
/// yields 0.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let denom2 = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom2 == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom2.sqrt()
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    let total = c.total();
    if total == 0 {
        return 0.0;
    }
    (c.tp + c.tn) as f64 / total as f64
}

/// Precision, recall and F1, with 0/0 mapping to 0.
pub fn precision_recall_f1(c: &ConfusionCounts) -> (f64, f64, f64) {
    let tp = c.tp as f64;
    let precision = if c.tp + c.fp == 0 { 0.0 } else { tp / (c.tp + c.fp) as f64 };
    let recall = if c.tp + c.fn_ == 0 { 0.0 } else { tp / (c.tp + c.fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Centered linear correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract(format!(
            "pearson needs equal lengths of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let mx = pairwise_sum_by(x, |v| v) / x.len() as f64;
    let my = pairwise_sum_by(y, |v| v) / y.len() as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance in pearson input".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Average ranks (1-based; ties share the mean of their positions).
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation: average ranks, then linear correlation of the ranks.
/// Without ties this equals the rank-difference formula
/// `1 - 6 sum(d^2) / (n (n^2 - 1))`.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract(format!(
            "spearman needs equal lengths of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson(&rx, &ry)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mcc_perfect_and_frozen_case() {
        let perfect = ConfusionCounts { tp: 5, tn: 5, fp: 0, fn_: 0 };
        assert_eq!(mcc(&perfect), 1.0);
        let c = ConfusionCounts { tp: 50, tn: 30, fp: 10, fn_: 10 };
        // (50*30 - 10*10) / sqrt(60*60*40*40) = 1400 / 2400
        assert!((mcc(&c) - 1400.0 / 2400.0).abs() < 1e-9);
    }

    #[test]
    fn mcc_degenerate_single_class() {
        let c = ConfusionCounts { tp: 10, tn: 0, fp: 5, fn_: 0 };
        assert_eq!(mcc(&c), 0.0);
    }

    #[test]
    fn mcc_class_swap_symmetry() {
        let c = ConfusionCounts { tp: 7, tn: 3, fp: 2, fn_: 5 };
        let swapped = ConfusionCounts { tp: 3, tn: 7, fp: 5, fn_: 2 };
        assert_eq!(mcc(&c), mcc(&swapped));
    }

    #[test]
    fn f1_cases() {
        let c = ConfusionCounts { tp: 50, tn: 0, fp: 10, fn_: 10 };
        let (p, r, f1) = precision_recall_f1(&c);
        assert!((p - 50.0 / 60.0).abs() < 1e-12);
        assert!((r - 50.0 / 60.0).abs() < 1e-12);
        assert!((f1 - 50.0 / 60.0).abs() < 1e-12);

        let zero_tp = ConfusionCounts { tp: 0, tn: 0, fp: 4, fn_: 0 };
        let (p, _, f1) = precision_recall_f1(&zero_tp);
        assert_eq!(p, 0.0);
        assert_eq!(f1, 0.0);
    }

    #[test]
    fn accuracy_cases() {
        let c = ConfusionCounts { tp: 5, tn: 5, fp: 0, fn_: 0 };
        assert_eq!(accuracy(&c), 1.0);
        let c = ConfusionCounts { tp: 50, tn: 30, fp: 10, fn_: 10 };
        assert!((accuracy(&c) - 0.8).abs() < 1e-12);
        // complement symmetry: swap correct and incorrect counts
        let swapped = ConfusionCounts { tp: 10, tn: 10, fp: 30, fn_: 50 };
        assert!((accuracy(&c) + accuracy(&swapped) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!((pearson(&x, &y2).unwrap() - 1.0).abs() < 1e-12);
        let yneg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &yneg).unwrap() + 1.0).abs() < 1e-12);
        // frozen high-precision value
        let y = [1.0, 3.0, 2.0, 5.0];
        assert!((pearson(&x, &y).unwrap() - 0.8315218406202999).abs() < 1e-12);
        assert!(matches!(
            pearson(&x, &[1.0, 1.0, 1.0, 1.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0];
        assert!((spearman(&x, &[10.0, 20.0, 35.0]).unwrap() - 1.0).abs() < 1e-12);
        // rank pattern [1,3,2]: 1 - 6*2 / (3*8) = 0.5 exactly
        assert_eq!(spearman(&x, &[1.0, 9.0, 4.0]).unwrap(), 0.5);
        assert!((spearman(&x, &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&x, &[1.0]).is_err());
    }

    #[test]
    fn spearman_monotone_invariance() {
        let x = [0.3, -2.0, 5.5, 1.1, 0.0];
        let y = [1.0, 4.0, -3.0, 2.0, 0.5];
        let base = spearman(&x, &y).unwrap();
        let warped: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        assert!((spearman(&warped, &y).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn confusion_from_binary() {
        let pred = [1usize, 0, 1, 1, 0];
        let truth = [1usize, 0, 0, 1, 1];
        let c = ConfusionCounts::from_binary(&pred, &truth).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, tn: 1, fp: 1, fn_: 1 });
    }
}
