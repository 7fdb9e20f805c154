//! Confusion matrices and F1 scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K x K` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    /// From 1-based truth and prediction labels.
    pub fn from_labels(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Metrics(format!(
                "{} true labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t == 0 || p == 0 || t > classes || p > classes {
                return Err(Error::Metrics(format!("label pair ({t}, {p}) outside [1, {classes}]")));
            }
            cm.counts[t - 1][p - 1] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Adds the counts of `other`.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Metrics("cannot merge matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    fn true_count(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn predicted_count(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

fn check(cm: &ConfusionMatrix) -> Result<()> {
    if cm.total() == 0 {
        Err(Error::Metrics("confusion matrix is empty".into()))
    } else {
        Ok(())
    }
}

/// Per-class F1 in label order. `None` marks a class with neither true nor
/// predicted instances. A zero precision or recall denominator counts as 0.
pub fn classwise_f1(cm: &ConfusionMatrix) -> Result<Vec<Option<f64>>> {
    check(cm)?;
    Ok((0..cm.classes)
        .map(|c| {
            let tp = cm.counts[c][c] as f64;
            let (t, p) = (cm.true_count(c), cm.predicted_count(c));
            if t == 0 && p == 0 {
                return None;
            }
            let precision = if p > 0 { tp / p as f64 } else { 0.0 };
            let recall = if t > 0 { tp / t as f64 } else { 0.0 };
            Some(if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            })
        })
        .collect())
}

/// Unweighted mean of the defined per-class F1 values.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let f: Vec<f64> = classwise_f1(cm)?.into_iter().flatten().collect();
    Ok(f.iter().sum::<f64>() / f.len() as f64)
}

/// Per-class F1 weighted by true-class support.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let f = classwise_f1(cm)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, v) in f.iter().enumerate() {
        let support = cm.true_count(c) as f64;
        num += v.unwrap_or(0.0) * support;
        den += support;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix {
            classes: rows.len(),
            counts: rows.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn perfect_is_one() {
        let m = cm(&[&[3, 0, 0], &[0, 5, 0], &[0, 0, 1]]);
        assert_eq!(macro_f1(&m).unwrap(), 1.0);
        assert_eq!(classwise_f1(&m).unwrap(), vec![Some(1.0); 3]);
    }

    #[test]
    fn half_and_half() {
        assert_eq!(macro_f1(&cm(&[&[5, 5], &[5, 5]])).unwrap(), 0.5);
    }

    #[test]
    fn no_hits_is_zero() {
        assert_eq!(macro_f1(&cm(&[&[0, 4], &[3, 0]])).unwrap(), 0.0);
    }

    #[test]
    fn absent_class_is_excluded() {
        let m = cm(&[&[2, 0, 0], &[0, 0, 0], &[0, 0, 2]]);
        assert_eq!(classwise_f1(&m).unwrap()[1], None);
        assert_eq!(macro_f1(&m).unwrap(), 1.0);
        // predicted but never true: counts as 0
        let m = cm(&[&[1, 1], &[0, 0]]);
        assert_eq!(classwise_f1(&m).unwrap(), vec![Some(2.0 / 3.0), Some(0.0)]);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(macro_f1(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn weighted_uses_support() {
        let m = cm(&[&[9, 1], &[0, 0]]);
        let f = classwise_f1(&m).unwrap();
        assert_eq!(weighted_f1(&m).unwrap(), f[0].unwrap());
    }

    #[test]
    fn labels_and_merge() {
        let a = ConfusionMatrix::from_labels(2, &[1, 2, 2], &[1, 1, 2]).unwrap();
        assert_eq!(a.counts, vec![vec![1, 0], vec![1, 1]]);
        let mut b = a.clone();
        b.merge(&a).unwrap();
        assert_eq!(b.total(), 6);
        assert!(ConfusionMatrix::from_labels(2, &[3], &[1]).is_err());
        assert!(ConfusionMatrix::from_labels(2, &[1], &[]).is_err());
    }
}
