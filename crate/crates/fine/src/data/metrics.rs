//! Evaluation metrics for continuous sentiment labels.
//!
//! Binarization convention: zero counts as positive ("non-negative"), so
//! the negative class is strictly `value < 0`. This is the one place that
//! rule lives.

use crate::{Error, Result};

/// Metric bundle reported by evaluation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub acc2: f64,
    pub f1: f64,
    pub acc7: f64,
    pub mse: f64,
}

fn is_positive(v: f64) -> bool {
    v >= 0.0
}

fn check_lengths(pred: &[f64], label: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::input("metrics", "empty input"));
    }
    if pred.len() != label.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} predictions vs {} labels", pred.len(), label.len()),
        ));
    }
    Ok(())
}

/// Binary accuracy under the non-negative/negative split.
pub fn acc2(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_lengths(pred, label)?;
    let hits = pred
        .iter()
        .zip(label.iter())
        .filter(|(&p, &y)| is_positive(p) == is_positive(y))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// F1 on the positive class of the acc2 binarization.
///
/// Degenerate case: no positives in either predictions or labels means
/// precision and recall are both vacuous; defined as 1.0.
pub fn f1(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_lengths(pred, label)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &y) in pred.iter().zip(label.iter()) {
        match (is_positive(p), is_positive(y)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp == 0 && tp + fn_ == 0 {
        return Ok(1.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Seven-class intensity bucket: clamp to [-3, 3], round half away from zero.
pub fn to_class7(v: f64) -> i32 {
    v.clamp(-3.0, 3.0).round() as i32
}

/// Exact seven-class match fraction.
pub fn acc7(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_lengths(pred, label)?;
    let hits = pred
        .iter()
        .zip(label.iter())
        .filter(|(&p, &y)| to_class7(p) == to_class7(y))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

pub fn mse(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_lengths(pred, label)?;
    let s: f64 = pred
        .iter()
        .zip(label.iter())
        .map(|(&p, &y)| (p - y) * (p - y))
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn compute_all(pred: &[f64], label: &[f64]) -> Result<Metrics> {
    Ok(Metrics {
        acc2: acc2(pred, label)?,
        f1: f1(pred, label)?,
        acc7: acc7(pred, label)?,
        mse: mse(pred, label)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc2_sign_agreement() {
        assert_eq!(acc2(&[-1.0, 2.0], &[-2.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn acc2_zero_is_positive() {
        // pred = 0 counts positive; label -0.5 is negative -> mismatch
        assert_eq!(acc2(&[0.0], &[-0.5]).unwrap(), 0.0);
        assert_eq!(acc2(&[0.0], &[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn acc2_identity() {
        let v = [0.2, -1.5, 3.0, 0.0];
        assert_eq!(acc2(&v, &v).unwrap(), 1.0);
    }

    #[test]
    fn acc2_empty_errors() {
        assert!(acc2(&[], &[]).is_err());
    }

    #[test]
    fn acc7_rounding_and_clamp() {
        assert_eq!(acc7(&[2.4], &[2.0]).unwrap(), 1.0);
        assert_eq!(acc7(&[3.7], &[3.0]).unwrap(), 1.0);
        // half away from zero
        assert_eq!(to_class7(0.5), 1);
        assert_eq!(to_class7(-0.5), -1);
        assert_eq!(to_class7(2.5), 3);
        assert_eq!(to_class7(-2.5), -3);
    }

    #[test]
    fn acc7_self_match_is_one() {
        let v = [-3.0, -0.4, 0.0, 0.4, 2.9];
        assert_eq!(acc7(&v, &v).unwrap(), 1.0);
    }

    #[test]
    fn f1_degenerate_no_positives() {
        assert_eq!(f1(&[-1.0, -2.0], &[-0.5, -3.0]).unwrap(), 1.0);
    }

    #[test]
    fn f1_zero_when_no_true_positive() {
        assert_eq!(f1(&[1.0], &[-1.0]).unwrap(), 0.0);
    }

    #[test]
    fn metrics_match_brute_force_confusion_oracle() {
        use rand::Rng as _;
        let mut rng = crate::numcore::rng_from_seed(42);
        let pred: Vec<f64> = (0..200).map(|_| rng.gen_range(-3.5..3.5)).collect();
        let label: Vec<f64> = (0..200).map(|_| rng.gen_range(-3.5..3.5)).collect();

        // Independent confusion-matrix oracle.
        let (mut tp, mut fp, mut tn, mut fn_) = (0f64, 0f64, 0f64, 0f64);
        for i in 0..200 {
            let p = pred[i] >= 0.0;
            let y = label[i] >= 0.0;
            match (p, y) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, false) => tn += 1.0,
                (false, true) => fn_ += 1.0,
            }
        }
        let acc_oracle = (tp + tn) / 200.0;
        let prec = tp / (tp + fp);
        let rec = tp / (tp + fn_);
        let f1_oracle = 2.0 * prec * rec / (prec + rec);
        let mut acc7_hits = 0.0;
        for i in 0..200 {
            let c = |v: f64| {
                let v = v.max(-3.0).min(3.0);
                if v >= 0.0 {
                    (v + 0.5).floor() as i64
                } else {
                    (v - 0.5).ceil() as i64
                }
            };
            if c(pred[i]) == c(label[i]) {
                acc7_hits += 1.0;
            }
        }

        assert_eq!(acc2(&pred, &label).unwrap(), acc_oracle);
        assert_eq!(f1(&pred, &label).unwrap(), f1_oracle);
        assert_eq!(acc7(&pred, &label).unwrap(), acc7_hits / 200.0);
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        use rand::Rng as _;
        let mut rng = crate::numcore::rng_from_seed(7);
        for _ in 0..20 {
            let n = rng.gen_range(1..50);
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let label: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            for v in [
                acc2(&pred, &label).unwrap(),
                f1(&pred, &label).unwrap(),
                acc7(&pred, &label).unwrap(),
            ] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
