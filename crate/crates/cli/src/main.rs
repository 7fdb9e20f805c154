use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bpd::data::SynthSpec;
use bpd::model::FeatureSelection;
use bpd::protocol::ModelKind;
use bpd_cli::*;

/// Behaviour pattern disentanglement for sensor-based activity recognition.
#[derive(Parser)]
#[command(name = "bpd", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (sectioned key = value file)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory or file
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the configured training seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured model
    #[arg(long, global = true, value_name = "baseline|bpd")]
    model: Option<ModelKind>,
    /// Worker threads for parallel folds and loading
    #[arg(long, global = true, env = "BPD_THREADS", hide_env_values = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model on the training portion of the configured split
    Train {
        /// LOSO fold to train (named by its test subject); defaults to the first
        #[arg(long)]
        fold: Option<String>,
    },
    /// Leave-one-subject-out cross validation
    Loso {
        /// Earlier report (or run directory) to print alongside this one
        #[arg(long, value_name = "REPORT")]
        against: Option<PathBuf>,
    },
    /// Score a checkpoint on the configured dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated subject ids; all subjects when absent
        #[arg(long, value_delimiter = ',')]
        subjects: Vec<String>,
    },
    /// Write a synthetic dataset (subject files plus manifest)
    Synth {
        /// Synthetic spec file; the built-in defaults when absent
        spec: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and loss
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write latent features of a BPD checkpoint as CSV
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        zsig: bool,
        #[arg(long)]
        zred: bool,
        #[arg(long)]
        enc: bool,
        #[arg(long, value_delimiter = ',')]
        subjects: Vec<String>,
    },
}

impl Global {
    fn config(&self) -> Result<bpd::config::RunConfig> {
        let Some(path) = &self.config else {
            bail!("this command needs --config");
        };
        let overrides = Overrides {
            seed: self.seed,
            model: self.model,
        };
        load_config(path, &overrides)
    }

    fn run_dir(&self, cfg: &bpd::config::RunConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| default_run_dir(cfg))
    }

    fn out_file(&self) -> Result<&Path> {
        match &self.out {
            Some(p) => Ok(p),
            None => bail!("this command needs --out"),
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot size the thread pool")?;
    }
    match cli.command {
        Command::Train { fold } => {
            let cfg = g.config()?;
            let dir = g.run_dir(&cfg);
            let s = cmd_train(&cfg, &dir, fold.as_deref())?;
            if let Some(last) = s.logs.last() {
                println!(
                    "trained on {} for {} epoch(s){}, final ce {:.4}",
                    s.train_subjects.join(","),
                    s.logs.len(),
                    if s.stopped_early { " (converged)" } else { "" },
                    last.ce
                );
            }
            println!("{}", s.dir.display());
        }
        Command::Loso { against } => {
            let cfg = g.config()?;
            let dir = g.run_dir(&cfg);
            cmd_loso(&cfg, &dir, against.as_deref())?;
            print!("{}", std::fs::read_to_string(dir.join(REPORT_TEXT))?);
            println!("{}", dir.display());
        }
        Command::Eval { checkpoint, subjects } => {
            let cfg = g.config()?;
            let r = cmd_eval(&checkpoint, &cfg, &subjects)?;
            print!("{}", r.render());
            if let Some(out) = &g.out {
                std::fs::write(out, serde_json::to_string_pretty(&r)? + "\n")
                    .with_context(|| format!("cannot write {}", out.display()))?;
            }
        }
        Command::Synth { spec } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
                    SynthSpec::parse(&p.display().to_string(), &text)?
                }
                None => SynthSpec::default(),
            };
            let manifest = cmd_synth(&spec, g.out_file()?)?;
            println!("{}", manifest.display());
        }
        Command::Gradcheck { seeds, inject_fault } => {
            let ok = cmd_gradcheck(seeds, inject_fault.then_some(1.0), std::io::stdout().lock())?;
            if !ok {
                eprintln!("gradient check failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ExportFeatures {
            checkpoint,
            zsig,
            zred,
            enc,
            subjects,
        } => {
            let cfg = g.config()?;
            let select = if zsig || zred || enc {
                FeatureSelection { z_sig: zsig, z_red: zred, enc }
            } else {
                FeatureSelection::default()
            };
            let out = g.out_file()?;
            let n = cmd_export_features(&checkpoint, &cfg, select, &subjects, out)?;
            println!("{n} rows written to {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
