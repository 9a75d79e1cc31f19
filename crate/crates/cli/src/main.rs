//! `psgd`: run, compare, and self-test preconditioned-SGD experiments.
//!
//! Exit codes: 0 success, 1 selftest failure, 2 malformed config,
//! 3 runtime abort.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{CompareConfig, RunConfig};
use psgd_core::error::Error;
use psgd_core::harness::{
    compare, run_experiment, summarize, summary_to_csv, trace_filename, trace_to_csv,
};
use psgd_core::kv::KvDoc;
use psgd_core::selftest;

#[derive(Parser)]
#[command(name = "psgd", about = "Preconditioned SGD with Lie-group preconditioners", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Override the config's run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment from a config file.
    Run { config: PathBuf },
    /// Execute an optimizers-by-seeds grid and summarize it.
    Compare { config: PathBuf },
    /// Run the fast oracle suite.
    Selftest,
}

const EXIT_SELFTEST: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Run { config } => cmd_run(config, &cli),
        Command::Compare { config } => cmd_compare(config, &cli),
        Command::Selftest => cmd_selftest(&cli),
    };
    match code {
        Ok(c) => c,
        Err(CmdError { exit, message }) => {
            eprintln!("psgd: {message}");
            ExitCode::from(exit)
        }
    }
}

struct CmdError {
    exit: u8,
    message: String,
}

fn config_err(e: Error) -> CmdError {
    CmdError { exit: EXIT_CONFIG, message: e.to_string() }
}

fn runtime_err(e: impl std::fmt::Display) -> CmdError {
    CmdError { exit: EXIT_RUNTIME, message: e.to_string() }
}

fn read_config(path: &Path) -> Result<String, CmdError> {
    fs::read_to_string(path).map_err(|e| CmdError {
        exit: EXIT_CONFIG,
        message: format!("cannot read config {}: {e}", path.display()),
    })
}

/// Writes via a temporary file and rename, so readers never see a partial
/// file.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CmdError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(runtime_err)?;
    fs::rename(&tmp, path).map_err(runtime_err)?;
    Ok(())
}

fn cmd_run(config_path: &Path, cli: &Cli) -> Result<ExitCode, CmdError> {
    let text = read_config(config_path)?;
    let mut cfg = RunConfig::parse(&text).map_err(config_err)?;
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.optimizer.seed = seed;
    }
    fs::create_dir_all(&cfg.out_dir).map_err(runtime_err)?;
    write_atomic(&cfg.out_dir.join("config_resolved.txt"), &cfg.to_kv().to_text())?;

    let problem = cfg.problem.build().map_err(config_err)?;
    let outcome =
        run_experiment(problem.as_ref(), &cfg.optimizer, cfg.n_iters).map_err(runtime_err)?;

    let file = trace_filename(problem.name(), cfg.optimizer.kind.name(), cfg.seed);
    write_atomic(&cfg.out_dir.join(&file), &trace_to_csv(&outcome.trace))?;

    let mut ckpt = KvDoc::new();
    outcome.state.to_kv(&mut ckpt);
    write_atomic(&cfg.out_dir.join("checkpoint.txt"), &ckpt.to_text())?;

    if let Some(abort) = outcome.abort {
        return Err(runtime_err(format!("run aborted: {abort}")));
    }
    if !cli.quiet {
        let final_loss = problem.full_loss(&outcome.state.theta).map_err(runtime_err)?;
        println!(
            "run complete: {} iterations, final loss {final_loss:e}, trace {}",
            outcome.trace.len(),
            cfg.out_dir.join(&file).display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(config_path: &Path, cli: &Cli) -> Result<ExitCode, CmdError> {
    let text = read_config(config_path)?;
    let mut cfg = CompareConfig::parse(&text).map_err(config_err)?;
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    fs::create_dir_all(&cfg.out_dir).map_err(runtime_err)?;
    write_atomic(&cfg.out_dir.join("config_resolved.txt"), &cfg.to_kv().to_text())?;

    let problem = cfg.problem.build().map_err(config_err)?;
    let records = compare(
        problem.as_ref(),
        &cfg.optimizers,
        &cfg.seeds,
        cfg.n_iters,
        cfg.loss_threshold,
    )
    .map_err(runtime_err)?;

    for record in &records {
        let file = trace_filename(&record.problem, &record.optimizer, record.seed);
        write_atomic(&cfg.out_dir.join(file), &trace_to_csv(&record.trace))?;
    }
    let summaries = summarize(&records, cfg.n_iters);
    write_atomic(&cfg.out_dir.join("summary.csv"), &summary_to_csv(&records, &summaries))?;

    if !cli.quiet {
        for cell in &summaries {
            println!(
                "{} / {}: median final loss {:e}, median iterations to {:e}: {}",
                cell.problem,
                cell.optimizer,
                cell.median_final_loss,
                cfg.loss_threshold,
                cell.median_iters_to_threshold
            );
        }
    }
    if records.iter().any(|r| r.aborted) {
        return Err(runtime_err("one or more grid runs aborted"));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_selftest(cli: &Cli) -> Result<ExitCode, CmdError> {
    let results = selftest::run_selftest();
    let mut failed = 0;
    for r in &results {
        if !cli.quiet || !r.passed {
            println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        }
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("psgd: selftest failed {failed}/{} checks", results.len());
        return Ok(ExitCode::from(EXIT_SELFTEST));
    }
    Ok(ExitCode::SUCCESS)
}
