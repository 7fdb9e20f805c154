//! Subject-wise evaluation: per-fold training, F1 reports and training
//! diagnostics.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{NormStats, SegmentDataset, SplitPlan};
use crate::error::{Error, Result};
use crate::metrics::{classwise_f1, macro_f1, weighted_f1, ConfusionMatrix};
use crate::trainer::{fit, BaselineModel, BpdModel, EpochLog, TrainConfig, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Baseline,
    Bpd,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Bpd => "bpd",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "bpd" => Ok(ModelKind::Bpd),
            other => Err(format!("unknown model `{other}` (expected baseline or bpd)")),
        }
    }
}

/// First/last comparisons over a loss trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub values: Vec<f64>,
    pub first: f64,
    pub last: f64,
}

impl Trajectory {
    fn from_values(values: Vec<f64>) -> Option<Self> {
        Some(Self {
            first: *values.first()?,
            last: *values.last()?,
            values,
        })
    }

    pub fn decreased(&self) -> bool {
        self.last < self.first
    }

    pub fn increased(&self) -> bool {
        self.last > self.first
    }
}

/// MINE, `C'` entropy and reconstruction trajectories of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub epochs: usize,
    pub ce: Trajectory,
    pub mine: Option<Trajectory>,
    pub entropy: Option<Trajectory>,
    pub recon: Option<Trajectory>,
}

impl Diagnostics {
    pub fn recon_improved(&self) -> bool {
        self.recon.as_ref().is_some_and(Trajectory::decreased)
    }

    pub fn mine_decreased(&self) -> bool {
        self.mine.as_ref().is_some_and(Trajectory::decreased)
    }

    pub fn entropy_increased(&self) -> bool {
        self.entropy.as_ref().is_some_and(Trajectory::increased)
    }
}

/// Summarises one run's epoch logs.
pub fn diagnostics(logs: &[EpochLog]) -> Result<Diagnostics> {
    if logs.is_empty() {
        return Err(Error::Metrics("no epoch logs".into()));
    }
    let series = |f: fn(&EpochLog) -> Option<f64>| -> Option<Trajectory> {
        let v: Option<Vec<f64>> = logs.iter().map(f).collect();
        Trajectory::from_values(v?)
    };
    Ok(Diagnostics {
        epochs: logs.len(),
        ce: series(|l| Some(l.ce)).expect("non-empty"),
        mine: series(|l| l.mine),
        entropy: series(|l| l.entropy),
        recon: series(|l| l.recon),
    })
}

/// Element-wise mean of several runs' logs, truncated to the shortest.
pub fn mean_logs(runs: &[Vec<EpochLog>]) -> Vec<EpochLog> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    let n = runs.len() as f64;
    (0..len)
        .map(|e| {
            let avg = |f: fn(&EpochLog) -> Option<f64>| -> Option<f64> {
                runs.iter().map(|r| f(&r[e])).sum::<Option<f64>>().map(|s| s / n)
            };
            EpochLog {
                epoch: e + 1,
                ce: avg(|l| Some(l.ce)).unwrap_or(f64::NAN),
                ne: avg(|l| l.ne),
                recon: avg(|l| l.recon),
                mine: avg(|l| l.mine),
                entropy: avg(|l| l.entropy),
                val_f1: avg(|l| l.val_f1),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject: String,
    pub segments: usize,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub name: String,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: String,
    pub confusion: ConfusionMatrix,
    pub epochs: usize,
    pub stopped_early: bool,
    pub diagnostics: Diagnostics,
}

/// Everything `run_protocol` measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub model: ModelKind,
    pub encoder: String,
    pub protocol: String,
    pub seed: u64,
    pub config_hash: String,
    pub subjects: Vec<SubjectRow>,
    /// Mean of the per-subject macro-F1 values.
    pub average: f64,
    pub weighted_average: f64,
    /// Pooled over every fold's predictions.
    pub classwise: Vec<ClassRow>,
    pub pooled_confusion: ConfusionMatrix,
    pub folds: Vec<FoldResult>,
    /// Fold-averaged epoch trajectories.
    pub diagnostics: Diagnostics,
}

impl MetricsReport {
    /// Column title: the encoder name, wrapped as `BPD(...)` for BPD runs.
    pub fn column_title(&self) -> String {
        match self.model {
            ModelKind::Baseline => self.encoder.clone(),
            ModelKind::Bpd => format!("BPD({})", self.encoder),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Metrics(format!("bad report: {e}")))
    }

    /// Subject rows then `Avg.`.
    pub fn render_table(&self) -> String {
        render_comparison(&[self])
    }
}

/// One column per report over shared subject rows, then an `Avg.` row.
pub fn render_comparison(reports: &[&MetricsReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let titles: Vec<String> = reports.iter().map(|r| r.column_title()).collect();
    let w0 = first
        .subjects
        .iter()
        .map(|s| s.subject.len())
        .chain(["Subject".len(), "Avg.".len()])
        .max()
        .unwrap_or(7);
    let widths: Vec<usize> = titles.iter().map(|t| t.len().max(6)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<w0$}", "Subject");
    for (t, w) in titles.iter().zip(&widths) {
        let _ = write!(out, "  {t:>w$}");
    }
    out.push('\n');
    for (i, row) in first.subjects.iter().enumerate() {
        let _ = write!(out, "{:<w0$}", row.subject);
        for (r, w) in reports.iter().zip(&widths) {
            match r.subjects.get(i) {
                Some(s) => {
                    let _ = write!(out, "  {:>w$.4}", s.macro_f1);
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-");
                }
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<w0$}", "Avg.");
    for (r, w) in reports.iter().zip(&widths) {
        let _ = write!(out, "  {:>w$.4}", r.average);
    }
    out.push('\n');
    out
}

/// Per-class F1 side by side, one column per report.
pub fn render_classwise(reports: &[&MetricsReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let w0 = first
        .classwise
        .iter()
        .map(|c| c.name.len())
        .chain(["Class".len()])
        .max()
        .unwrap_or(5);
    let titles: Vec<String> = reports.iter().map(|r| r.column_title()).collect();
    let widths: Vec<usize> = titles.iter().map(|t| t.len().max(6)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<w0$}", "Class");
    for (t, w) in titles.iter().zip(&widths) {
        let _ = write!(out, "  {t:>w$}");
    }
    out.push('\n');
    for (i, row) in first.classwise.iter().enumerate() {
        let _ = write!(out, "{:<w0$}", row.name);
        for (r, w) in reports.iter().zip(&widths) {
            match r.classwise.get(i).and_then(|c| c.f1) {
                Some(f) => {
                    let _ = write!(out, "  {f:>w$.4}");
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "n/a");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Identifies a run in its report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunInfo {
    pub dataset: String,
    pub config_hash: String,
    /// Whether to z-score each fold with its training statistics.
    pub normalize: bool,
}

fn fit_predict<M: Trainable>(
    mut model: M,
    train: &SegmentDataset,
    test: &SegmentDataset,
    cfg: &TrainConfig,
) -> Result<(Vec<usize>, Vec<EpochLog>, bool)> {
    let out = fit(&mut model, train, cfg, None, |_| {})?;
    Ok((model.predict(test)?, out.logs, out.stopped_early))
}

fn train_fold(
    data: &SegmentDataset,
    train: &[String],
    test: &[String],
    cfg: &TrainConfig,
    kind: ModelKind,
    normalize: bool,
) -> Result<(Vec<usize>, Vec<usize>, Vec<EpochLog>, bool)> {
    let mut tr = data.select_subjects(train);
    let mut te = data.select_subjects(test);
    if tr.is_empty() || te.is_empty() {
        return Err(Error::Data("fold has no training or no test segments".into()));
    }
    if normalize {
        let stats = NormStats::fit(&tr)?;
        stats.apply(&mut tr)?;
        stats.apply(&mut te)?;
    }
    let (c, w, k) = (data.channels(), data.window(), data.classes());
    let (pred, logs, early) = match kind {
        ModelKind::Bpd => fit_predict(BpdModel::new(cfg, c, w, k)?, &tr, &te, cfg)?,
        ModelKind::Baseline => fit_predict(BaselineModel::new(cfg, c, w, k)?, &tr, &te, cfg)?,
    };
    Ok((te.labels().to_vec(), pred, logs, early))
}

/// Trains and evaluates every fold of `plan`, folds in parallel on the
/// current rayon pool, and assembles the report in fold order.
pub fn run_protocol(
    data: &SegmentDataset,
    plan: &SplitPlan,
    cfg: &TrainConfig,
    kind: ModelKind,
    info: &RunInfo,
) -> Result<(MetricsReport, Vec<Vec<EpochLog>>)> {
    cfg.validate()?;
    let results: Vec<(Vec<usize>, Vec<usize>, Vec<EpochLog>, bool)> = plan
        .folds
        .par_iter()
        .map(|f| {
            train_fold(data, &f.train, &f.test, cfg, kind, info.normalize).map_err(|e| Error::Fold {
                fold: f.name(),
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let k = data.classes();
    let mut pooled = ConfusionMatrix::new(k);
    let mut subjects = Vec::new();
    let mut folds = Vec::new();
    let mut all_logs = Vec::new();
    for (fold, (truth, pred, logs, early)) in plan.folds.iter().zip(results) {
        let cm = ConfusionMatrix::from_labels(k, &truth, &pred)?;
        pooled.merge(&cm)?;
        subjects.push(SubjectRow {
            subject: fold.name(),
            segments: truth.len(),
            macro_f1: macro_f1(&cm)?,
            weighted_f1: weighted_f1(&cm)?,
        });
        folds.push(FoldResult {
            fold: fold.name(),
            confusion: cm,
            epochs: logs.len(),
            stopped_early: early,
            diagnostics: diagnostics(&logs)?,
        });
        all_logs.push(logs);
    }
    let n = subjects.len() as f64;
    let average = subjects.iter().map(|s| s.macro_f1).sum::<f64>() / n;
    let weighted_average = subjects.iter().map(|s| s.weighted_f1).sum::<f64>() / n;
    let names = data.label_names();
    let classwise = classwise_f1(&pooled)?
        .into_iter()
        .enumerate()
        .map(|(i, f1)| ClassRow {
            class: i + 1,
            name: names.get(&(i + 1)).cloned().unwrap_or_else(|| format!("class{}", i + 1)),
            f1,
        })
        .collect();
    let report = MetricsReport {
        dataset: info.dataset.clone(),
        model: kind,
        encoder: cfg.encoder.display_name().to_string(),
        protocol: plan.kind.to_string(),
        seed: cfg.seed,
        config_hash: info.config_hash.clone(),
        subjects,
        average,
        weighted_average,
        classwise,
        pooled_confusion: pooled,
        folds,
        diagnostics: diagnostics(&mean_logs(&all_logs))?,
    };
    Ok((report, all_logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(epoch: usize, recon: f64) -> EpochLog {
        EpochLog {
            epoch,
            ce: 1.0,
            ne: Some(-0.5),
            recon: Some(recon),
            mine: Some(0.1),
            entropy: Some(0.5),
            val_f1: None,
        }
    }

    #[test]
    fn single_log_compares_equal() {
        let d = diagnostics(&[log(1, 2.0)]).unwrap();
        assert_eq!(d.epochs, 1);
        assert_eq!(d.recon.as_ref().unwrap().first, d.recon.as_ref().unwrap().last);
        assert!(!d.recon_improved());
    }

    #[test]
    fn decreasing_recon_is_flagged() {
        let logs: Vec<_> = (1..=5).map(|e| log(e, 10.0 / e as f64)).collect();
        assert!(diagnostics(&logs).unwrap().recon_improved());
        assert!(diagnostics(&[]).is_err());
    }

    #[test]
    fn mean_logs_averages() {
        let a = vec![log(1, 2.0), log(2, 1.0)];
        let b = vec![log(1, 4.0)];
        let m = mean_logs(&[a, b]);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].recon, Some(3.0));
    }
}
