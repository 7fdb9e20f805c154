use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SegmentDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Loso,
    Holdout,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Loso => "loso",
            SplitKind::Holdout => "holdout",
        })
    }
}

impl FromStr for SplitKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "loso" => Ok(SplitKind::Loso),
            "holdout" => Ok(SplitKind::Holdout),
            other => Err(format!("unknown protocol `{other}` (expected loso or holdout)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Fold {
    /// Row label in reports: the test subject ids joined by `+`.
    pub fn name(&self) -> String {
        self.test.join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub folds: Vec<Fold>,
}

/// Subject-disjoint folds. Subjects keep their dataset order.
pub fn plan_splits(data: &SegmentDataset, kind: SplitKind, holdout_test: Option<&[String]>) -> Result<SplitPlan> {
    let subjects = data.subject_ids();
    if subjects.len() < 2 {
        return Err(Error::Data(format!("need at least 2 subjects, found {}", subjects.len())));
    }
    let folds = match kind {
        SplitKind::Loso => subjects
            .iter()
            .map(|s| Fold {
                train: subjects.iter().filter(|t| *t != s).cloned().collect(),
                test: vec![s.clone()],
            })
            .collect(),
        SplitKind::Holdout => {
            let test = holdout_test.unwrap_or(&[]);
            if test.is_empty() {
                return Err(Error::Config("holdout needs at least one test subject".into()));
            }
            if let Some(u) = test.iter().find(|t| !subjects.contains(t)) {
                return Err(Error::Config(format!("unknown test subject `{u}`")));
            }
            let train: Vec<String> = subjects.iter().filter(|s| !test.contains(s)).cloned().collect();
            if train.is_empty() {
                return Err(Error::Config("holdout leaves no training subjects".into()));
            }
            let test = subjects.iter().filter(|s| test.contains(s)).cloned().collect();
            vec![Fold { train, test }]
        }
    };
    Ok(SplitPlan { kind, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(subjects: usize) -> SegmentDataset {
        let mut d = SegmentDataset::new(1, 1, 1).unwrap();
        for s in 0..subjects {
            d.push(&[0.0], 1, &format!("s{}", s + 1)).unwrap();
        }
        d
    }

    #[test]
    fn loso_is_a_partition_per_fold() {
        let d = data(8);
        let p = plan_splits(&d, SplitKind::Loso, None).unwrap();
        assert_eq!(p.folds.len(), 8);
        for f in &p.folds {
            assert_eq!(f.train.len(), 7);
            assert!(f.test.iter().all(|t| !f.train.contains(t)));
            let mut all: Vec<_> = f.train.iter().chain(&f.test).cloned().collect();
            all.sort();
            let mut want = d.subject_ids();
            want.sort();
            assert_eq!(all, want);
        }
    }

    #[test]
    fn holdout_28_7() {
        let d = data(35);
        let test: Vec<String> = (29..=35).map(|i| format!("s{i}")).collect();
        let p = plan_splits(&d, SplitKind::Holdout, Some(&test)).unwrap();
        assert_eq!(p.folds.len(), 1);
        assert_eq!(p.folds[0].train.len(), 28);
        assert_eq!(p.folds[0].test.len(), 7);
    }

    #[test]
    fn errors() {
        assert!(plan_splits(&data(1), SplitKind::Loso, None).is_err());
        assert!(plan_splits(&data(3), SplitKind::Holdout, Some(&["s9".into()])).is_err());
        assert!(plan_splits(&data(3), SplitKind::Holdout, None).is_err());
    }
}
