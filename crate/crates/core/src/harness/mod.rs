//! Benchmark problems, experiment runner, and trace emission.
//!
//! A run is (problem, optimizer config, iteration count); it emits one
//! [`TraceRow`] per iteration and is bit-reproducible from its seed (wall
//! time excepted). `compare` executes a grid of optimizers × seeds on one
//! problem and aggregates per-cell medians. Grid cells are independent
//! (each owns its state and random streams) and are executed here in a
//! fixed sequential order so output listings are stable.

mod problems;

pub use problems::{
    make_mlp_classifier, make_noisy_quadratic, make_rosenbrock, make_tiny_lstm_lm, MlpClassifier,
    NoisyQuadratic, ProblemSpec, Rosenbrock, TinyLstmLm,
};

use std::time::Instant;

use crate::error::{Error, Result};
use crate::kv::format_f64;
use crate::optimizers::{OptimizerConfig, OptimizerState};
use crate::problem::Problem;

/// One iteration's record.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    /// Batch loss observed by the step.
    pub loss: f64,
    /// L2 norm of the raw stochastic gradient.
    pub grad_norm: f64,
    /// Cumulative preconditioner updates so far.
    pub precond_updates: u64,
    /// Wall time of the step in milliseconds. Informational; every other
    /// column is deterministic given the seed.
    pub wall_ms: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "iteration,loss,grad_norm,precond_updates,wall_ms";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration,
            format_f64(self.loss),
            format_f64(self.grad_norm),
            self.precond_updates,
            format_f64(self.wall_ms)
        )
    }

    /// Equality on the deterministic columns (everything but wall_ms).
    pub fn deterministic_eq(&self, other: &TraceRow) -> bool {
        self.iteration == other.iteration
            && self.loss.to_bits() == other.loss.to_bits()
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
            && self.precond_updates == other.precond_updates
    }
}

/// Renders a trace as CSV text with the required header.
pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from(TraceRow::CSV_HEADER);
    out.push('\n');
    for row in trace {
        out.push_str(&row.to_csv_line());
        out.push('\n');
    }
    out
}

/// Bit-exact comparison of two traces on the deterministic columns.
pub fn traces_deterministic_eq(a: &[TraceRow], b: &[TraceRow]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.deterministic_eq(y))
}

/// Canonical per-run trace file name.
pub fn trace_filename(problem: &str, optimizer: &str, seed: u64) -> String {
    format!("{problem}_{optimizer}_{seed}.csv")
}

/// Outcome of a run: the trace, the final optimizer state, and the abort
/// error when the run stopped early (the trace then holds the completed
/// iterations).
#[derive(Debug)]
pub struct RunOutcome {
    pub trace: Vec<TraceRow>,
    pub state: OptimizerState,
    pub abort: Option<Error>,
}

/// Executes `n_iters` optimizer steps on the problem, recording one trace
/// row per iteration. Deterministic per seed. Non-finite aborts end the run
/// early and are reported in the outcome; other errors propagate.
///
/// ```
/// use psgd_core::harness::{make_rosenbrock, run_experiment};
/// use psgd_core::lie_groups::GroupKind;
/// use psgd_core::optimizers::{OptimizerConfig, OptimizerKind};
///
/// let problem = make_rosenbrock()?;
/// let mut config = OptimizerConfig::new(OptimizerKind::NewtonPsgd);
/// config.group = GroupKind::UpperTriangular;
/// config.q_init = 0.1;
/// config.mu = 0.5;
/// config.mu0 = 0.2;
/// config.seed = 1;
/// let out = run_experiment(&problem, &config, 300)?;
/// assert!(out.trace.iter().any(|row| row.loss < 1e-8));
/// # Ok::<(), psgd_core::Error>(())
/// ```
pub fn run_experiment(
    problem: &dyn Problem,
    config: &OptimizerConfig,
    n_iters: u64,
) -> Result<RunOutcome> {
    config.validate()?;
    let mut state = OptimizerState::init(problem, config)?;
    let mut trace = Vec::with_capacity(n_iters as usize);
    for i in 0..n_iters {
        let t0 = Instant::now();
        match state.step(problem, config) {
            Ok(rep) => trace.push(TraceRow {
                iteration: i,
                loss: rep.loss,
                grad_norm: rep.grad_norm,
                precond_updates: state.precond_updates(),
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            }),
            Err(e @ Error::NonFiniteAbort { .. }) => {
                return Ok(RunOutcome { trace, state, abort: Some(e) })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(RunOutcome { trace, state, abort: None })
}

/// One run's line in a comparison.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub problem: String,
    pub optimizer: String,
    pub seed: u64,
    pub trace: Vec<TraceRow>,
    /// Full-dataset loss at the final parameters (NaN when the run aborted).
    pub final_loss: f64,
    /// First iteration with batch loss below the threshold, if reached.
    pub iters_to_threshold: Option<u64>,
    pub aborted: bool,
}

/// A comparison cell's aggregate across seeds.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub problem: String,
    pub optimizer: String,
    pub median_final_loss: f64,
    /// Median iterations-to-threshold; runs that never reach it count as
    /// n_iters + 1.
    pub median_iters_to_threshold: f64,
}

/// Runs optimizers × seeds on one problem. Each run gets its own state and
/// random streams; cells are executed in a fixed order so output is stable.
pub fn compare(
    problem: &dyn Problem,
    optimizers: &[(String, OptimizerConfig)],
    seeds: &[u64],
    n_iters: u64,
    loss_threshold: f64,
) -> Result<Vec<RunRecord>> {
    let mut records = Vec::with_capacity(optimizers.len() * seeds.len());
    for (name, base_config) in optimizers {
        for &seed in seeds {
            let mut config = base_config.clone();
            config.seed = seed;
            let outcome = run_experiment(problem, &config, n_iters)?;
            let aborted = outcome.abort.is_some();
            let final_loss = if aborted {
                f64::NAN
            } else {
                problem.full_loss(&outcome.state.theta)?
            };
            let iters_to_threshold = outcome
                .trace
                .iter()
                .find(|r| r.loss < loss_threshold)
                .map(|r| r.iteration);
            records.push(RunRecord {
                problem: problem.name().to_string(),
                optimizer: name.clone(),
                seed,
                trace: outcome.trace,
                final_loss,
                iters_to_threshold,
                aborted,
            });
        }
    }
    Ok(records)
}

/// Median; averages the middle pair on even lengths.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-cell medians across seeds, in first-appearance order.
pub fn summarize(records: &[RunRecord], n_iters: u64) -> Vec<CellSummary> {
    let mut cells: Vec<(String, String)> = Vec::new();
    for r in records {
        let key = (r.problem.clone(), r.optimizer.clone());
        if !cells.contains(&key) {
            cells.push(key);
        }
    }
    cells
        .into_iter()
        .map(|(problem, optimizer)| {
            let mut losses: Vec<f64> = records
                .iter()
                .filter(|r| r.problem == problem && r.optimizer == optimizer)
                .map(|r| r.final_loss)
                .collect();
            let mut iters: Vec<f64> = records
                .iter()
                .filter(|r| r.problem == problem && r.optimizer == optimizer)
                .map(|r| r.iters_to_threshold.map_or((n_iters + 1) as f64, |i| i as f64))
                .collect();
            CellSummary {
                problem,
                optimizer,
                median_final_loss: median(&mut losses),
                median_iters_to_threshold: median(&mut iters),
            }
        })
        .collect()
}

/// Summary CSV: one row per run plus its cell's medians.
pub fn summary_to_csv(records: &[RunRecord], summaries: &[CellSummary]) -> String {
    let mut out = String::from(
        "problem,optimizer,seed,final_loss,iters_to_threshold,median_final_loss,median_iters_to_threshold\n",
    );
    for r in records {
        let cell = summaries
            .iter()
            .find(|c| c.problem == r.problem && c.optimizer == r.optimizer)
            .expect("summary covers every record");
        let iters = r.iters_to_threshold.map_or(String::from("-1"), |i| i.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.problem,
            r.optimizer,
            r.seed,
            format_f64(r.final_loss),
            iters,
            format_f64(cell.median_final_loss),
            format_f64(cell.median_iters_to_threshold),
        ));
    }
    out
}
