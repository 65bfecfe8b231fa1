//! Command-line entry points.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::config::{resolve_output_dir, ExperimentConfig};
use crate::harness::lemmas::{run_lemma_log, run_lemma_square, LemmaOutcome};
use crate::harness::plot::emit_plot;
use crate::harness::records::read_records;
use crate::harness::sweep::{check_records, pool, run_sweep};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ASSERT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "privalign", version, about = "Private and corruption-robust preference alignment simulations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; falls back to the config, then $PRIVALIGN_OUT, then ./out.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Exit with status 3 when an acceptance check fails.
    #[arg(long)]
    pub assert: bool,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Offline solvers over the configured grid.
    RunOffline(Common),
    /// Online solvers over the configured grid.
    RunOnline(Common),
    /// Bound check for maximum likelihood under local privacy.
    VerifyLemmaLog(Common),
    /// Bound check for debiased least squares under privacy and corruption.
    VerifyLemmaSquare(Common),
    /// Every configured solver, then a plot.
    Sweep(Common),
    /// Renders records to SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Records CSV; defaults to <out>/records.csv.
        #[arg(long)]
        records: Option<PathBuf>,
    },
}

enum Outcome {
    Done,
    AssertFailed(Vec<String>),
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::AssertFailed(failures)) => {
            for f in failures {
                eprintln!("assertion failed: {f}");
            }
            EXIT_ASSERT
        }
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds.base = seed;
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    let out = resolve_output_dir(common.out.as_deref(), &cfg);
    cfg.output_dir = Some(out.clone());
    cfg.validate()?;
    Ok((cfg, out))
}

fn sweep(cfg: &ExperimentConfig, out: &Path, assert: bool, plot: bool) -> Result<Outcome> {
    let records = run_sweep(cfg, Some(out))?;
    println!("{} records written to {}", records.len(), out.display());
    if plot {
        let svg = emit_plot(&records, &cfg.plot)?;
        std::fs::write(out.join(&cfg.plot.file), svg)?;
    }
    let failures = check_records(cfg, &records);
    Ok(if assert && !failures.is_empty() {
        Outcome::AssertFailed(failures)
    } else {
        Outcome::Done
    })
}

fn lemma(outcome: LemmaOutcome, out: &Path, assert: bool) -> Result<Outcome> {
    outcome.write(out)?;
    println!(
        "K = {}; {} violations in {} pairs",
        outcome.constant,
        outcome.total_violations(),
        outcome.total_pairs()
    );
    if let Some(p) = &outcome.plateau {
        println!("bias plateau slope {:.4} (r2 {:.4})", p.slope, p.r2);
    }
    let failures = outcome.failures();
    Ok(if assert && !failures.is_empty() {
        Outcome::AssertFailed(failures)
    } else {
        Outcome::Done
    })
}

fn execute(command: Command) -> Result<Outcome> {
    match command {
        Command::RunOffline(c) => {
            let (cfg, out) = load(&c)?;
            let cfg = cfg.with_solvers(|s| !s.is_online())?;
            sweep(&cfg, &out, c.assert, false)
        }
        Command::RunOnline(c) => {
            let (cfg, out) = load(&c)?;
            let cfg = cfg.with_solvers(|s| s.is_online())?;
            sweep(&cfg, &out, c.assert, false)
        }
        Command::Sweep(c) => {
            let (cfg, out) = load(&c)?;
            sweep(&cfg, &out, c.assert, true)
        }
        Command::VerifyLemmaLog(c) => {
            let (cfg, out) = load(&c)?;
            let outcome = pool(cfg.workers)?.install(|| run_lemma_log(&cfg.lemma, cfg.seeds.base))?;
            lemma(outcome, &out, c.assert)
        }
        Command::VerifyLemmaSquare(c) => {
            let (cfg, out) = load(&c)?;
            let outcome = pool(cfg.workers)?.install(|| run_lemma_square(&cfg.lemma, cfg.seeds.base))?;
            lemma(outcome, &out, c.assert)
        }
        Command::Plot { common, records } => {
            let (cfg, out) = load(&common)?;
            let path = records.unwrap_or_else(|| out.join("records.csv"));
            let rows = read_records(&path)?;
            let svg = emit_plot(&rows, &cfg.plot)?;
            std::fs::create_dir_all(&out)?;
            let target = out.join(&cfg.plot.file);
            std::fs::write(&target, svg)?;
            println!("plot written to {}", target.display());
            Ok(Outcome::Done)
        }
    }
}
