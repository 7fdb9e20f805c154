//! Commands behind the `bpd` binary. Each returns once its outputs are fully
//! written; nothing is written when a command fails.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use bpd::checkpoint::Checkpoint;
use bpd::config::RunConfig;
use bpd::data::{plan_splits, write_synthetic, NormStats, SegmentDataset, SplitKind, SynthSpec};
use bpd::gradcheck::{run_suite, summarise, GradCheck};
use bpd::metrics::{classwise_f1, macro_f1, weighted_f1, ConfusionMatrix};
use bpd::model::FeatureSelection;
use bpd::nn::EncoderSpec;
use bpd::protocol::{render_classwise, render_comparison, run_protocol, ClassRow, MetricsReport, ModelKind, RunInfo};
use bpd::trainer::{fit, BaselineModel, BpdModel, EpochLog};

pub const CONFIG_FILE: &str = "config.ini";
pub const META_FILE: &str = "run_meta.json";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bpd";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub model: Option<ModelKind>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(m) = self.model {
            cfg.protocol.model = m;
        }
    }
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::read(path)?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

/// `runs/<UTC timestamp>-<first 12 hex digits of the config hash>`.
pub fn default_run_dir(cfg: &RunConfig) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    PathBuf::from("runs").join(format!("{stamp}-{}", &cfg.hash()[..12]))
}

#[derive(Serialize)]
struct RunMeta<'a> {
    timestamp: String,
    config_hash: &'a str,
}

/// Files are staged in memory and written together at the end.
#[derive(Default)]
struct RunFiles {
    files: Vec<(&'static str, Vec<u8>)>,
}

impl RunFiles {
    fn new(cfg: &RunConfig) -> Self {
        let mut f = Self::default();
        f.add(CONFIG_FILE, cfg.resolved());
        let hash = cfg.hash();
        let meta = RunMeta {
            timestamp: chrono::Utc::now().to_rfc3339(),
            config_hash: &hash,
        };
        f.add(META_FILE, serde_json::to_string_pretty(&meta).expect("meta serialises") + "\n");
        f
    }

    fn add(&mut self, name: &'static str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name, bytes.into()));
    }

    fn write(self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for (name, bytes) in self.files {
            let path = dir.join(name);
            fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct FoldEpoch<'a> {
    fold: &'a str,
    #[serde(flatten)]
    log: &'a EpochLog,
}

fn jsonl(rows: impl IntoIterator<Item = String>) -> String {
    rows.into_iter().map(|r| r + "\n").collect()
}

/// Normalises `train` in place when the config asks for it.
fn normalize_train(cfg: &RunConfig, train: &mut SegmentDataset) -> Result<Option<NormStats>> {
    if !cfg.data.normalize {
        return Ok(None);
    }
    let stats = NormStats::fit(train)?;
    stats.apply(train)?;
    Ok(Some(stats))
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub train_subjects: Vec<String>,
    pub logs: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Fits one model on the training portion of the configured split. For
/// LOSO that is the fold named `fold`, or the first fold.
pub fn cmd_train(cfg: &RunConfig, dir: &Path, fold: Option<&str>) -> Result<TrainSummary> {
    let (_, data) = cfg.load_data()?;
    let test = (cfg.protocol.kind == SplitKind::Holdout).then_some(cfg.protocol.test_subjects.as_slice());
    let plan = plan_splits(&data, cfg.protocol.kind, test)?;
    let chosen = match fold {
        None => &plan.folds[0],
        Some(name) => match plan.folds.iter().find(|f| f.name() == name) {
            Some(f) => f,
            None => bail!(
                "no fold `{name}`; folds are {}",
                plan.folds.iter().map(|f| f.name()).collect::<Vec<_>>().join(", ")
            ),
        },
    };
    let mut train = data.select_subjects(&chosen.train);
    let norm = normalize_train(cfg, &mut train)?;
    let t = &cfg.train;
    let (c, w, k) = (data.channels(), data.window(), data.classes());
    let names = data.label_names().clone();
    let (logs, stopped_early, checkpoint) = match cfg.protocol.model {
        ModelKind::Bpd => {
            let mut m = BpdModel::new(t, c, w, k)?;
            let out = fit(&mut m, &train, t, None, |_| {})?;
            (out.logs, out.stopped_early, Checkpoint::from_bpd(&m, norm, names))
        }
        ModelKind::Baseline => {
            let mut m = BaselineModel::new(t, c, w, k)?;
            let out = fit(&mut m, &train, t, None, |_| {})?;
            (out.logs, out.stopped_early, Checkpoint::from_baseline(&m, norm, names))
        }
    };
    let mut files = RunFiles::new(cfg);
    files.add(EPOCHS_FILE, jsonl(logs.iter().map(|l| serde_json::to_string(l).expect("log serialises"))));
    files.add(CHECKPOINT_FILE, checkpoint.encode());
    files.write(dir)?;
    Ok(TrainSummary {
        dir: dir.to_path_buf(),
        train_subjects: chosen.train.clone(),
        logs,
        stopped_early,
    })
}

/// Leave-one-subject-out evaluation of the configured model. With
/// `against`, the other report must share the fold definitions and a
/// side-by-side table is added.
pub fn cmd_loso(cfg: &RunConfig, dir: &Path, against: Option<&Path>) -> Result<MetricsReport> {
    let other = against.map(read_report).transpose()?;
    let (name, data) = cfg.load_data()?;
    let plan = plan_splits(&data, SplitKind::Loso, None)?;
    if let (Some(o), Some(path)) = (&other, against) {
        let ours: Vec<String> = plan.folds.iter().map(|f| f.name()).collect();
        if fold_names(o) != ours {
            bail!("{} does not share this run's folds", path.display());
        }
    }
    let info = RunInfo {
        dataset: name,
        config_hash: cfg.hash(),
        normalize: cfg.data.normalize,
    };
    let (report, logs) = run_protocol(&data, &plan, &cfg.train, cfg.protocol.model, &info)?;
    let mut files = RunFiles::new(cfg);
    let lines = plan.folds.iter().zip(&logs).flat_map(|(f, ls)| {
        let fold = f.name();
        ls.iter()
            .map(|log| serde_json::to_string(&FoldEpoch { fold: &fold, log }).expect("log serialises"))
            .collect::<Vec<_>>()
    });
    files.add(EPOCHS_FILE, jsonl(lines));
    files.add(REPORT_JSON, report.to_json() + "\n");
    let mut text = report_text(&[&report]);
    if let Some(o) = &other {
        let pair = match o.model {
            ModelKind::Baseline => [o, &report],
            ModelKind::Bpd => [&report, o],
        };
        text.push('\n');
        text.push_str(&report_text(&pair));
    }
    files.add(REPORT_TEXT, text);
    files.write(dir)?;
    Ok(report)
}

fn fold_names(r: &MetricsReport) -> Vec<String> {
    r.subjects.iter().map(|s| s.subject.clone()).collect()
}

/// Reads `report.json`, or the one inside a run directory.
pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let file = if path.is_dir() { path.join(REPORT_JSON) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).with_context(|| format!("cannot read {}", file.display()))?;
    Ok(MetricsReport::from_json(&text)?)
}

pub fn report_text(reports: &[&MetricsReport]) -> String {
    let mut s = format!("Macro F1 ({} protocol, {})\n\n", reports[0].protocol, reports[0].dataset);
    s.push_str(&render_comparison(reports));
    s.push_str("\nClass-wise F1\n\n");
    s.push_str(&render_classwise(reports));
    s
}

/// Fields in which a dataset differs from the encoder a checkpoint expects.
pub fn geometry_mismatch(spec: &EncoderSpec, classes: usize, data: &SegmentDataset) -> Vec<String> {
    let mut out = Vec::new();
    for (field, want, got) in [
        ("channels", spec.input_channels, data.channels()),
        ("window", spec.window_length, data.window()),
        ("classes", classes, data.classes()),
    ] {
        if want != got {
            out.push(format!("{field} (checkpoint {want}, dataset {got})"));
        }
    }
    out
}

fn checked_data(ck: &Checkpoint, cfg: &RunConfig, subjects: &[String]) -> Result<SegmentDataset> {
    let (_, data) = cfg.load_data()?;
    let diff = geometry_mismatch(&ck.meta.spec, ck.meta.classes, &data);
    if !diff.is_empty() {
        bail!("dataset does not match the checkpoint: {}", diff.join(", "));
    }
    let mut data = if subjects.is_empty() {
        data
    } else {
        let known = data.subject_ids();
        if let Some(s) = subjects.iter().find(|s| !known.contains(s)) {
            bail!("unknown subject `{s}`");
        }
        data.select_subjects(subjects)
    };
    if let Some(n) = &ck.meta.norm {
        n.apply(&mut data)?;
    }
    Ok(data)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub model: ModelKind,
    pub segments: usize,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub classwise: Vec<ClassRow>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = format!(
            "{} segments, macro F1 {:.4}, weighted F1 {:.4}\n",
            self.segments, self.macro_f1, self.weighted_f1
        );
        for c in &self.classwise {
            let f = c.f1.map_or("-".to_string(), |v| format!("{v:.4}"));
            s.push_str(&format!("  {:>3} {:<24} {f}\n", c.class, c.name));
        }
        s
    }
}

/// Scores a checkpoint on the configured dataset, optionally restricted
/// to some subjects.
pub fn cmd_eval(checkpoint: &Path, cfg: &RunConfig, subjects: &[String]) -> Result<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let data = checked_data(&ck, cfg, subjects)?;
    let pred = match ck.meta.model {
        ModelKind::Bpd => ck.to_bpd()?.nets.predict(&data)?,
        ModelKind::Baseline => ck.to_baseline()?.net.predict(&data)?,
    };
    let k = ck.meta.classes;
    let cm = ConfusionMatrix::from_labels(k, data.labels(), &pred)?;
    let classwise = classwise_f1(&cm)?
        .into_iter()
        .enumerate()
        .map(|(i, f1)| ClassRow {
            class: i + 1,
            name: ck.meta.label_names.get(&(i + 1)).cloned().unwrap_or_else(|| format!("class{}", i + 1)),
            f1,
        })
        .collect();
    Ok(EvalReport {
        model: ck.meta.model,
        segments: data.len(),
        macro_f1: macro_f1(&cm)?,
        weighted_f1: weighted_f1(&cm)?,
        classwise,
        confusion: cm,
    })
}

/// Writes the subject files and manifest; returns the manifest path.
pub fn cmd_synth(spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    Ok(write_synthetic(spec, dir)?)
}

/// Prints one line per checked operation; true when all pass.
pub fn cmd_gradcheck(seeds: u64, fault: Option<f64>, mut out: impl Write) -> Result<bool> {
    let check = GradCheck {
        fault,
        ..GradCheck::default()
    };
    let reports = run_suite(&check, seeds);
    let mut ok = true;
    writeln!(out, "{:<24} {:>12}  result", "operation", "max rel err")?;
    for (name, err, passed) in summarise(&reports) {
        ok &= passed;
        writeln!(out, "{name:<24} {err:>12.3e}  {}", if passed { "ok" } else { "FAIL" })?;
    }
    for r in reports.iter().filter(|r| r.error.is_some()) {
        writeln!(out, "{}: {}", r.name, r.error.as_deref().unwrap_or_default())?;
    }
    writeln!(out, "tolerance {:e}, {} seeds", check.tolerance, seeds)?;
    Ok(ok)
}

/// Writes a feature table for every selected segment; returns the row count.
pub fn cmd_export_features(
    checkpoint: &Path,
    cfg: &RunConfig,
    select: FeatureSelection,
    subjects: &[String],
    out: &Path,
) -> Result<usize> {
    if !(select.z_sig || select.z_red || select.enc) {
        bail!("select at least one of --zsig, --zred, --enc");
    }
    let ck = load_checkpoint(checkpoint)?;
    if ck.meta.model != ModelKind::Bpd {
        bail!("feature export needs a BPD checkpoint, found {}", ck.meta.model);
    }
    let data = checked_data(&ck, cfg, subjects)?;
    let table = ck.to_bpd()?.nets.feature_table(&data, select)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, buf).with_context(|| format!("cannot write {}", out.display()))?;
    Ok(table.rows.len())
}
