use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bpd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bpd"))
        .args(args)
        .current_dir(cwd)
        .env("BPD_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_RUN: &str = "\
[data]
normalize = true

[train]
batch_size = 16
max_epoch = 2
seed = 5
latent_dim = 8

[synth]
classes = 3
subjects = 3
channels = 2
window = 16
segments_per_subject_per_class = 4
";

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn train_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.ini", SMALL_RUN);
    let cfg = cfg.to_str().unwrap();
    let o = bpd(&["train", "--config", cfg, "--out", "a"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("a");
    for f in ["config.ini", "run_meta.json", "epochs.jsonl", "checkpoint.bpd"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let logs = fs::read_to_string(run.join("epochs.jsonl")).unwrap();
    assert_eq!(logs.lines().count(), 2);
    let resolved = fs::read_to_string(run.join("config.ini")).unwrap();
    assert!(resolved.contains("learning_rate = 0.0001"), "{resolved}");
    assert!(resolved.contains("max_epoch = 2"));

    let o = bpd(&["train", "--config", cfg, "--out", "b"], tmp.path());
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(tmp.path().join("b/epochs.jsonl")).unwrap(), logs);
    assert_eq!(
        fs::read(run.join("checkpoint.bpd")).unwrap(),
        fs::read(tmp.path().join("b/checkpoint.bpd")).unwrap()
    );

    let o = bpd(&["train", "--config", cfg, "--out", "c", "--seed", "6"], tmp.path());
    assert!(o.status.success());
    assert_ne!(fs::read_to_string(tmp.path().join("c/epochs.jsonl")).unwrap(), logs);

    // without --out the run lands under runs/<timestamp>-<hash>
    let o = bpd(&["train", "--config", cfg], tmp.path());
    assert!(o.status.success());
    let made: Vec<_> = fs::read_dir(tmp.path().join("runs")).unwrap().collect();
    assert_eq!(made.len(), 1);
}

#[test]
fn misspelt_key_is_named_with_a_suggestion() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.ini", &SMALL_RUN.replace("max_epoch = 2", "learningrate = 0.1"));
    let o = bpd(&["train", "--config", cfg.to_str().unwrap(), "--out", "x"], tmp.path());
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("`learningrate`") && e.contains("`learning_rate`"), "{e}");
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn loso_reports_share_folds_across_models() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.ini", SMALL_RUN);
    let cfg = cfg.to_str().unwrap();
    let o = bpd(&["loso", "--config", cfg, "--out", "base", "--model", "baseline"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = bpd(&["loso", "--config", cfg, "--out", "bpd", "--model", "bpd", "--against", "base"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("bpd/report.txt")).unwrap();
    assert!(text.contains("CNN") && text.contains("BPD(CNN)"), "{text}");
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with('s') || l.starts_with("Avg.")).collect();
    assert!(rows.iter().any(|l| l.starts_with("Avg.")));
    for s in ["s1", "s2", "s3"] {
        assert!(rows.iter().any(|l| l.starts_with(s)), "{s} row missing from\n{text}");
    }
    let logs = fs::read_to_string(tmp.path().join("bpd/epochs.jsonl")).unwrap();
    assert_eq!(logs.lines().count(), 3 * 2);
    assert!(logs.lines().next().unwrap().contains("\"fold\":\"s1\""));
}

#[test]
fn failed_loso_leaves_no_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.ini", "[data]\nmanifest = nowhere/manifest.ini\n");
    let o = bpd(&["loso", "--config", cfg.to_str().unwrap(), "--out", "out"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn synth_writes_identical_files_for_the_same_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bpd(&["synth", "--out", "d1"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(tmp.path().join("d1/manifest.ini")).unwrap();
    let listed = manifest.lines().skip_while(|l| *l != "[subjects]").skip(1).filter(|l| !l.is_empty()).count();
    assert_eq!(listed, 8);
    assert!(bpd(&["synth", "--out", "d2"], tmp.path()).status.success());
    for entry in fs::read_dir(tmp.path().join("d1")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(tmp.path().join("d1").join(&name)).unwrap(),
            fs::read(tmp.path().join("d2").join(&name)).unwrap()
        );
    }
    // the generated manifest drives a run
    let cfg = write_config(
        tmp.path(),
        "m.ini",
        "[data]\nmanifest = d1/manifest.ini\nwindow = 64\noverlap = 0\n[train]\nmax_epoch = 1\nlatent_dim = 8\n",
    );
    let o = bpd(&["train", "--config", cfg.to_str().unwrap(), "--out", "r"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_detects_a_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bpd(&["gradcheck", "--seeds", "1"], tmp.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("matmul") && out.contains("ce_loss"), "{out}");
    let o = bpd(&["gradcheck", "--seeds", "1", "--inject-fault"], tmp.path());
    assert!(!o.status.success());
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn export_and_eval_use_the_trained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.ini", SMALL_RUN);
    let cfg = cfg.to_str().unwrap();
    assert!(bpd(&["train", "--config", cfg, "--out", "run"], tmp.path()).status.success());
    let ck = "run/checkpoint.bpd";

    let o = bpd(&["export-features", "--config", cfg, "--checkpoint", ck, "--zsig", "--out", "f.csv"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("f.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 3 + 8);
    assert_eq!(&header[..4], &["segment_id", "subject", "label", "f0"]);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 36);
    for r in rows {
        let cells: Vec<&str> = r.split(',').collect();
        assert_eq!(cells.len(), header.len());
        assert!(cells[3..].iter().all(|c| c.parse::<f64>().is_ok()));
    }

    let o = bpd(&["eval", "--config", cfg, "--checkpoint", ck, "--subjects", "s2", "--out", "eval.json"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("12 segments"), "{}", stdout(&o));
    assert!(fs::read_to_string(tmp.path().join("eval.json")).unwrap().contains("\"macro_f1\""));

    let other = write_config(tmp.path(), "wide.ini", &SMALL_RUN.replace("channels = 2", "channels = 4"));
    let o = bpd(
        &["export-features", "--config", other.to_str().unwrap(), "--checkpoint", ck, "--out", "g.csv"],
        tmp.path(),
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("channels (checkpoint 2, dataset 4)"), "{}", stderr(&o));
    assert!(!tmp.path().join("g.csv").exists());
}
