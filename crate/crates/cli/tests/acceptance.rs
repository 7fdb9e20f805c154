//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria whose measured outcome is a recorded, analysed failure are listed
//! in `KNOWN_FAILING`; they still print FAIL. The process exits nonzero when
//! any other criterion fails.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;

use bpd::config::RunConfig;
use bpd::data::{generate_synthetic, load_manifest, SynthSpec};
use bpd::gradcheck::{run_suite, GradCheck};
use bpd::metrics::{classwise_f1, macro_f1, ConfusionMatrix};
use bpd::mine::MineEstimator;
use bpd::model::{BpdNetworks, Component};
use bpd::nn::seeded_rng;
use bpd::protocol::{MetricsReport, ModelKind};
use bpd::trainer::{run_phase, BpdModel, StepAt, TrainConfig};
use bpd_cli::{cmd_loso, EPOCHS_FILE, META_FILE};

/// Criteria that do not hold on the shipped benchmark.
const KNOWN_FAILING: &[u32] = &[4, 5];

/// Shipped-benchmark reference values (macro-F1 averages over 8 folds).
const PINNED_BPD_AVG: f64 = 0.6773;
const PINNED_BASELINE_AVG: f64 = 0.7461;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn within(limit: Duration, t: Duration) -> (bool, String) {
    (t <= limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

// 1
fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let reports = run_suite(&GradCheck::default(), 5);
    let (ok_time, time) = within(Duration::from_secs(60), t.elapsed());
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && ok_time,
        format!("{} checks, worst rel err {worst:.2e}, failed {failed:?}, {time}", reports.len()),
    )
}

// 2
fn mine_oracle() -> Outcome {
    let t = Instant::now();
    let sample = |rho: f64, seed: u64| {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = seeded_rng(seed);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for _ in 0..10_000 {
            let a: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            x.push(a);
            y.push(rho * a + (1.0 - rho * rho).sqrt() * e);
        }
        (
            bpd::Tensor::from_f64(&[10_000, 1], &x).unwrap(),
            bpd::Tensor::from_f64(&[10_000, 1], &y).unwrap(),
        )
    };
    let (x, y) = sample(0.8, 21);
    let high = MineEstimator::default().estimate(&x, &y).unwrap();
    let (x, y) = sample(0.0, 22);
    let zero = MineEstimator::default().estimate(&x, &y).unwrap();
    let truth = -0.5 * (1.0f64 - 0.64).ln();
    let (ok_time, time) = within(Duration::from_secs(180), t.elapsed());
    outcome(
        (high - truth).abs() <= 0.10 && zero.abs() <= 0.05 && ok_time,
        format!("rho 0.8: {high:.4} (analytic {truth:.4}); rho 0: {zero:.4}; {time}"),
    )
}

// 3
fn phase_isolation() -> Outcome {
    let t = Instant::now();
    let data = generate_synthetic(&SynthSpec {
        subjects: 2,
        segments_per_subject_per_class: 8,
        ..SynthSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        seed: 9,
        ..TrainConfig::default()
    };
    let mut m = BpdModel::new(&cfg, data.channels(), data.window(), data.classes()).unwrap();
    let expected: [&[&str]; 4] = [
        &["classifier_red", "classifier_sig", "disentangler_red", "disentangler_sig", "encoder"],
        &["disentangler_red", "encoder"],
        &["disentangler_red", "disentangler_sig", "mi_network"],
        &["disentangler_red", "disentangler_sig", "reconstructor"],
    ];
    let digests = |n: &BpdNetworks<f32>| Component::ALL.map(|c| (c.name(), n.digest(c)));
    let mut violations = Vec::new();
    for step in 0..10usize {
        let idx: Vec<usize> = (0..64).map(|i| (i + step * 7) % data.len()).collect();
        let x = data.batch::<f32>(&idx).unwrap();
        let y = data.batch_labels(&idx);
        for (phase, want) in expected.iter().enumerate() {
            let before = digests(&m.nets);
            let mut rng = seeded_rng((step * 4 + phase) as u64);
            let at = StepAt { epoch: 1, batch: step + 1 };
            run_phase(phase, &mut m.nets, &mut m.opts, &x, &y, &cfg, &mut rng, at).unwrap();
            let after = digests(&m.nets);
            let changed: BTreeSet<&str> = before.iter().zip(&after).filter(|(a, b)| a.1 != b.1).map(|(a, _)| a.0).collect();
            if changed != want.iter().copied().collect() {
                violations.push(format!("step {} phase {}: {changed:?}", step + 1, phase + 1));
            }
        }
    }
    let (ok_time, time) = within(Duration::from_secs(30), t.elapsed());
    outcome(
        violations.is_empty() && ok_time,
        format!("10 steps x 4 phases, {} violation(s) {violations:?}, {time}", violations.len()),
    )
}

struct LosoRuns {
    bpd: MetricsReport,
    baseline: MetricsReport,
    bpd_dir: tempfile::TempDir,
    elapsed: Duration,
}

fn shipped_loso() -> LosoRuns {
    let t = Instant::now();
    let mut cfg = RunConfig::read(&repo_root().join("configs/synth-loso.ini")).unwrap();
    let bpd_dir = tempfile::tempdir().unwrap();
    cfg.protocol.model = ModelKind::Bpd;
    let bpd = cmd_loso(&cfg, bpd_dir.path(), None).unwrap();
    let base_dir = tempfile::tempdir().unwrap();
    cfg.protocol.model = ModelKind::Baseline;
    let baseline = cmd_loso(&cfg, base_dir.path(), None).unwrap();
    LosoRuns {
        bpd,
        baseline,
        bpd_dir,
        elapsed: t.elapsed(),
    }
}

// 4
fn synthetic_regression(runs: &LosoRuns) -> Outcome {
    let d = &runs.bpd.diagnostics;
    let mine = d.mine.as_ref().unwrap();
    let ent = d.entropy.as_ref().unwrap();
    let f1_ok = runs.bpd.average >= runs.baseline.average;
    let (ok_time, time) = within(Duration::from_secs(15 * 60), runs.elapsed);
    let mut s = format!(
        "avg F1 BPD {:.4} vs baseline {:.4} [{}]; mine {:.3} -> {:.3} [{}]; C' entropy {:.4} -> {:.4} [{}]; {time}",
        runs.bpd.average,
        runs.baseline.average,
        if f1_ok { "ok" } else { "no" },
        mine.first,
        mine.last,
        if d.mine_decreased() { "ok" } else { "no" },
        ent.first,
        ent.last,
        if d.entropy_increased() { "ok" } else { "no" },
    );
    let drift = (runs.bpd.average - PINNED_BPD_AVG).abs().max((runs.baseline.average - PINNED_BASELINE_AVG).abs());
    if drift > 5e-4 {
        write!(s, "; differs from pinned {PINNED_BPD_AVG}/{PINNED_BASELINE_AVG} by {drift:.4}").unwrap();
    }
    outcome(f1_ok && d.mine_decreased() && d.entropy_increased() && ok_time, s)
}

// 5
fn init_sanity(runs: &LosoRuns) -> Outcome {
    let k = runs.bpd.pooled_confusion.classes as f64;
    let ce1 = runs.bpd.diagnostics.ce.first;
    let target = 2.0 * k.ln();
    let text = fs::read_to_string(runs.bpd_dir.path().join(EPOCHS_FILE)).unwrap();
    let mut ne_outside = 0;
    let mut ne_count = 0;
    let mut worst_fold_ce: f64 = 0.0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let ne = v["ne"].as_f64().unwrap();
        ne_count += 1;
        if !(-k.ln()..=0.0).contains(&ne) {
            ne_outside += 1;
        }
        if v["epoch"].as_u64() == Some(1) {
            worst_fold_ce = worst_fold_ce.max((v["ce"].as_f64().unwrap() - target).abs());
        }
    }
    outcome(
        (ce1 - target).abs() <= 0.15 && ne_outside == 0,
        format!(
            "fold-mean epoch-1 ce {ce1:.4} vs 2 ln K = {target:.4} (|diff| {:.4}, worst fold {worst_fold_ce:.4}); \
             ne outside [-ln K, 0] in {ne_outside} of {ne_count} epochs",
            (ce1 - target).abs()
        ),
    )
}

// 6
fn segmentation_arithmetic() -> Outcome {
    let mut rng = seeded_rng(606);
    let dir = tempfile::tempdir().unwrap();
    let mut wrong = Vec::new();
    for case in 0..20 {
        let window = rng.random_range(2..200usize);
        let overlap = [0.0, 0.25, 0.5, 0.75, 0.9][rng.random_range(0..5)];
        let t = if case == 0 { window } else { window + rng.random_range(0..800usize) };
        let stride = ((window as f64) * (1.0 - overlap)).round() as usize;
        if stride == 0 {
            continue;
        }
        let expected = (t - window) / stride + 1;
        let mut csv = String::new();
        for i in 0..t {
            writeln!(csv, "{i},{}.5,1", i % 13).unwrap();
        }
        fs::write(dir.path().join("s.csv"), csv).unwrap();
        fs::write(
            dir.path().join("m.ini"),
            "name = crafted\nsampling_rate = 1\nchannels = 1\nlabels = 1=a, 2=b\n\n[subjects]\ns = s.csv\n",
        )
        .unwrap();
        let (_, data) = load_manifest(&dir.path().join("m.ini"), window, overlap).unwrap();
        if data.len() != expected {
            wrong.push(format!("T={t} w={window} o={overlap}: {} != {expected}", data.len()));
        }
    }
    outcome(wrong.is_empty(), format!("20 loader cases incl. T = window, mismatches {wrong:?}"))
}

// 7
fn metric_oracle() -> Outcome {
    let mut rng = seeded_rng(707);
    let mut mismatches = 0;
    for _ in 0..100 {
        let k = rng.random_range(2..10usize);
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..rng.random_range(1..300usize) {
            // skew toward the diagonal and leave some classes unused
            let t = rng.random_range(1..=k);
            let p = if rng.random_bool(0.5) { t } else { rng.random_range(1..=k) };
            if t != k || rng.random_bool(0.3) {
                truth.push(t);
                pred.push(p);
            }
        }
        if truth.is_empty() {
            truth.push(1);
            pred.push(2);
        }
        let cm = ConfusionMatrix::from_labels(k, &truth, &pred).unwrap();
        let mut scores: Vec<Option<f64>> = Vec::new();
        for c in 1..=k {
            let tp = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p == c).count();
            let fp = truth.iter().zip(&pred).filter(|(t, p)| **t != c && **p == c).count();
            let fneg = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p != c).count();
            if tp + fp + fneg == 0 {
                scores.push(None);
                continue;
            }
            let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let recall = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
            let f = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            scores.push(Some(f));
        }
        let defined: Vec<f64> = scores.iter().flatten().copied().collect();
        let brute_macro = defined.iter().sum::<f64>() / defined.len() as f64;
        if classwise_f1(&cm).unwrap() != scores || macro_f1(&cm).unwrap() != brute_macro {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("100 random matrices, {mismatches} inexact"))
}

const DETERMINISM_RUN: &str = "\
[data]
normalize = true

[train]
batch_size = 32
max_epoch = 3
seed = 8
latent_dim = 32

[synth]
classes = 4
subjects = 4
channels = 3
window = 32
segments_per_subject_per_class = 6
noise_std = 0.5
";

// 8
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse("determinism.ini", DETERMINISM_RUN, dir.path()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_loso(&cfg, &a, None).unwrap();
    cmd_loso(&cfg, &b, None).unwrap();
    let mut differing = Vec::new();
    let mut compared = 0;
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        if name == META_FILE {
            continue;
        }
        compared += 1;
        if fs::read(a.join(&name)).unwrap() != fs::read(b.join(&name)).unwrap() {
            differing.push(name.to_string_lossy().into_owned());
        }
    }
    outcome(
        differing.is_empty() && compared >= 4,
        format!("{compared} files compared (report.json included), differing {differing:?}"),
    )
}

fn pamap2_subject_file(seed: u64) -> String {
    let mut rng = seeded_rng(seed);
    let mut s = String::new();
    let activities = [0u32, 1, 0, 4, 17, 0, 24];
    let mut t = 0usize;
    for &a in &activities {
        let len = if a == 0 { 50 } else { 420 };
        for _ in 0..len {
            write!(s, "{:.2} {a}", t as f64 / 100.0).unwrap();
            if t % 11 == 0 {
                write!(s, " {}", 90 + rng.random_range(0..30)).unwrap();
            } else {
                s.push_str(" NaN");
            }
            for c in 0..51 {
                // orientation columns of PAMAP2 are often invalid; mimic with NaN runs
                if c % 17 >= 13 && rng.random_bool(0.05) {
                    s.push_str(" NaN");
                } else {
                    let v = (a as f64 * 0.3 + c as f64 * 0.01) * ((t as f64) * 0.05 + c as f64).sin() + rng.random_range(-0.2..0.2);
                    write!(s, " {v:.6}").unwrap();
                }
            }
            s.push('\n');
            t += 1;
        }
    }
    s
}

// 9
fn pamap2_smoke() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::create_dir(p.join("Protocol")).unwrap();
    fs::write(p.join("Protocol/subject101.dat"), pamap2_subject_file(1)).unwrap();
    fs::write(p.join("Protocol/subject102.dat"), pamap2_subject_file(2)).unwrap();
    let shipped = fs::read_to_string(repo_root().join("configs/pamap2-manifest.ini")).unwrap();
    let manifest: String = shipped
        .lines()
        .filter(|l| !l.starts_with("10") || l.starts_with("101") || l.starts_with("102"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(p.join("pamap2-manifest.ini"), manifest).unwrap();
    let run = "[data]\nmanifest = pamap2-manifest.ini\nwindow = 168\noverlap = 0.5\n\n[train]\nmax_epoch = 2\nseed = 0\n";
    let cfg = RunConfig::parse("pamap2.ini", run, p).unwrap();
    let out = p.join("out");
    let report = match cmd_loso(&cfg, &out, None) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("cmd_loso failed: {e:#}")),
    };
    let text = fs::read_to_string(out.join("report.txt")).unwrap_or_default();
    let table: Vec<&str> = text.lines().collect();
    let header_ok = table.iter().any(|l| l.starts_with("Subject") && l.contains("BPD(CNN)"));
    let rows_ok = ["101", "102", "Avg."].iter().all(|r| table.iter().any(|l| l.starts_with(r)));
    let classes_ok = report.classwise.len() == 12 && report.classwise[3].name == "walking";
    let avg_ok = (report.average - (report.subjects[0].macro_f1 + report.subjects[1].macro_f1) / 2.0).abs() < 1e-12;
    outcome(
        header_ok && rows_ok && classes_ok && avg_ok && report.subjects.len() == 2,
        format!(
            "2-subject PAMAP2 layout: {} segments, rows 101/102/Avg. {}, 12 class rows {}",
            report.pooled_confusion.total(),
            if rows_ok { "present" } else { "missing" },
            if classes_ok { "present" } else { "missing" }
        ),
    )
}

fn main() {
    let mut unexpected = Vec::new();
    let mut record = |n: u32, name: &str, t: Instant, o: Outcome| {
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n} {status} [{:.1}s] {name}: {}",
            t.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass && !KNOWN_FAILING.contains(&n) {
            unexpected.push(n);
        }
    };
    let t = Instant::now();
    record(1, "gradient suite", t, gradient_suite());
    let t = Instant::now();
    record(2, "MINE Gaussian oracle", t, mine_oracle());
    let t = Instant::now();
    record(3, "phase isolation", t, phase_isolation());
    let t = Instant::now();
    let runs = shipped_loso();
    record(4, "synthetic disentanglement regression", t, synthetic_regression(&runs));
    let t = Instant::now();
    record(5, "initialisation sanity", t, init_sanity(&runs));
    let t = Instant::now();
    record(6, "segmentation arithmetic", t, segmentation_arithmetic());
    let t = Instant::now();
    record(7, "metric oracle", t, metric_oracle());
    let t = Instant::now();
    record(8, "determinism", t, determinism());
    let t = Instant::now();
    record(9, "PAMAP2 smoke path", t, pamap2_smoke());
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
