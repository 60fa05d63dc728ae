//! `nosa` command-line harness: trace generation and replay, locality
//! checks, offloading simulation and report merging.
//!
//! Exit codes: 0 success, 1 property violation, 2 usage or input error.

pub mod config;
pub mod output;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use nosa_core::attention::{generate_trace, replay_trace, DecodeTrace, ModelFile};
use nosa_core::locality::{baseline_locality, layer_sweep, verify_locality_bound};
use nosa_core::sim::{simulate_grid, throughput_curve, uniform_grid, write_curve_csv, GridPoint, Policy, SimReport};

use config::{read_json, ExperimentConfig, LoadedConfig, Overrides};
use output::{csv_bytes, write_atomic, write_json, Envelope, WithExperiment};
use report::{merge, read_rows, LocalityData, SUMMARY_COLUMNS};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(csv::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn failed(e: impl std::fmt::Display) -> Self {
        CliError::Failed(e.to_string())
    }
}

/// What a successful run found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Violation,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Ok => 0,
            Outcome::Violation => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nosa", version, about = "Locality-constrained sparse attention and KV offloading experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate seeded weights and a decode trace (model.json, trace.json)
    Gen(Overrides),
    /// Re-decode a model and compare every step with a trace
    Replay {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Check the locality floor on a trace (locality.json, gamma.csv)
    CheckTheorem {
        #[arg(long)]
        trace: PathBuf,
        /// Report the overlap series without asserting any floor
        #[arg(long = "no-bound")]
        no_bound: bool,
        /// Output directory
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Per-layer overlap of both selectors on random models (layers.json, layers.csv)
    Locality(Overrides),
    /// Simulate decoding over contexts, budgets and policies (simulation.json, simulation.csv)
    Simulate(Overrides),
    /// Modeled throughput against hit rate (curve.json, curve.csv)
    Curve {
        #[command(flatten)]
        overrides: Overrides,
        /// Number of grid intervals on [0, 1]
        #[arg(long = "grid_intervals", default_value_t = 100)]
        grid_intervals: usize,
    },
    /// Merge artifacts into one summary (summary.json, summary.csv)
    Report {
        /// JSON artifacts or summary CSV files
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Gen(o) => gen(&o.load()?),
        Command::Replay { model, trace } => replay(&model, &trace),
        Command::CheckTheorem { trace, no_bound, out } => check_theorem(&trace, no_bound, &out),
        Command::Locality(o) => locality(&o.load()?),
        Command::Simulate(o) => simulate(&o.load()?),
        Command::Curve {
            overrides,
            grid_intervals,
        } => curve(&overrides.load()?, grid_intervals),
        Command::Report { inputs, out } => report_cmd(&inputs, &out),
    }
}

fn gen(loaded: &LoadedConfig) -> Result<Outcome, CliError> {
    let c = &loaded.config;
    let (model, trace) = generate_trace(&c.attention(), c.variant, c.selector, c.seed, c.steps)
        .map_err(CliError::failed)?;
    write_json(&c.out.join("model.json"), &WithExperiment { experiment: c, body: &model })?;
    write_json(&c.out.join("trace.json"), &WithExperiment { experiment: c, body: &trace })?;
    println!(
        "wrote {} steps x {} kv heads to {}",
        trace.heads.first().map_or(0, |h| h.steps.len()),
        trace.heads.len(),
        c.out.display()
    );
    Ok(Outcome::Ok)
}

fn replay(model: &Path, trace: &Path) -> Result<Outcome, CliError> {
    let model: ModelFile = read_json(model)?;
    let trace: DecodeTrace = read_json(trace)?;
    match replay_trace(&model, &trace) {
        Ok(()) => {
            println!("replay matches");
            Ok(Outcome::Ok)
        }
        Err(e @ nosa_core::attention::AttentionError::ReplayMismatch { .. }) => {
            println!("{e}");
            Ok(Outcome::Violation)
        }
        Err(e) => Err(CliError::failed(e)),
    }
}

#[derive(Deserialize)]
struct Echo {
    experiment: Option<ExperimentConfig>,
}

/// Experiment echoed in a trace file, or one rebuilt from the trace header.
fn trace_experiment(path: &Path, trace: &DecodeTrace) -> Result<ExperimentConfig, CliError> {
    if let Some(e) = read_json::<Echo>(path)?.experiment {
        return Ok(e);
    }
    let a = &trace.config;
    Ok(ExperimentConfig {
        seed: trace.seed,
        n: a.n,
        d: a.d,
        n_head: a.n_head,
        n_kv_head: a.n_kv_head,
        d_head: a.d_head,
        n_b: a.n_b,
        n_s: a.n_s,
        n_w: a.n_w,
        k: a.k,
        k_q: a.k_q,
        k_e: a.k_e,
        accounting: a.accounting,
        variant: trace.variant,
        selector: trace.selector,
        ..ExperimentConfig::default()
    })
}

fn check_theorem(path: &Path, no_bound: bool, out: &Path) -> Result<Outcome, CliError> {
    let trace: DecodeTrace = read_json(path)?;
    let mut experiment = trace_experiment(path, &trace)?;
    experiment.out = out.to_path_buf();
    let report = if no_bound {
        baseline_locality(&trace)
    } else {
        verify_locality_bound(&trace)
    };
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(CliError::failed)?;
    write_atomic(&out.join("gamma.csv"), &csv)?;
    let data = LocalityData {
        selector: trace.selector.to_string(),
        n: trace.config.n,
        report,
    };
    write_json(&out.join("locality.json"), &Envelope::new("locality", &experiment, &data))?;
    let r = &data.report;
    println!(
        "steps {}  min gamma {:.6}  mean gamma {:.6}  bound {}",
        r.per_step.len(),
        r.min_gamma,
        r.mean_gamma,
        r.bound.map_or("none".to_string(), |b| format!("{b:.6}"))
    );
    match r.first_violation() {
        Some(v) => {
            println!(
                "VIOLATION at step {} (kv head {}): gamma {} = {}/{} below bound; {} violating steps",
                v.step,
                v.kv_head,
                v.gamma,
                v.reused,
                v.selected,
                r.violations.len()
            );
            Ok(Outcome::Violation)
        }
        None => Ok(Outcome::Ok),
    }
}

fn locality(loaded: &LoadedConfig) -> Result<Outcome, CliError> {
    let c = &loaded.config;
    let layers = layer_sweep(&c.attention(), c.variant, c.n_layers, c.steps, c.seed).map_err(CliError::failed)?;
    write_json(&c.out.join("layers.json"), &Envelope::new("layers", c, &layers))?;
    let header = [
        "layer",
        "seed",
        "nosa_mean",
        "nosa_min",
        "baseline_mean",
        "baseline_min",
        "bound",
        "violations",
    ];
    write_atomic(&c.out.join("layers.csv"), &csv_bytes(&layers, &header)?)?;
    for l in &layers {
        println!(
            "layer {:>3}  nosa mean {:.4} min {:.4}  baseline mean {:.4} min {:.4}  bound {:.4}",
            l.layer, l.nosa_mean, l.nosa_min, l.baseline_mean, l.baseline_min, l.bound
        );
    }
    let violations: usize = layers.iter().map(|l| l.violations).sum();
    Ok(if violations == 0 { Outcome::Ok } else { Outcome::Violation })
}

/// Grid cells of a simulate run: contexts x budgets x policies, or one
/// fixed batch per context and policy when `batch` is set.
pub fn grid_points(c: &ExperimentConfig) -> Result<Vec<GridPoint>, CliError> {
    let contexts = if c.contexts.is_empty() { vec![c.n] } else { c.contexts.clone() };
    let policies: Vec<Policy> = match c.policy {
        Some(p) => vec![p],
        None => Policy::ALL.to_vec(),
    };
    let mut points = Vec::new();
    for &n in &contexts {
        let sim = c.sim_config(n);
        match c.batch {
            Some(batch) => {
                for &policy in &policies {
                    points.push(GridPoint {
                        policy,
                        n,
                        memory_budget: sim.memory_footprint(policy, batch),
                    });
                }
            }
            None if c.memory_budgets.is_empty() => {
                return Err(CliError::Usage("simulate needs `batch` or `memory_budgets`".into()))
            }
            None => {
                for &memory_budget in &c.memory_budgets {
                    for &policy in &policies {
                        points.push(GridPoint { policy, n, memory_budget });
                    }
                }
            }
        }
    }
    Ok(points)
}

pub const SIMULATION_COLUMNS: [&str; 12] = [
    "policy",
    "batch",
    "n",
    "memory_bytes",
    "steps",
    "hit_rate",
    "tokens_per_s",
    "mean_step_s",
    "attn_ratio",
    "bytes_up",
    "bytes_down",
    "max_topk_fetch",
];

fn simulate(loaded: &LoadedConfig) -> Result<Outcome, CliError> {
    let c = &loaded.config;
    let params = c.cost_params()?;
    let points = grid_points(c)?;
    let reports: Vec<SimReport> = simulate_grid(&c.sim_config(c.n), &points, &params).map_err(CliError::failed)?;
    write_json(&c.out.join("simulation.json"), &Envelope::new("simulation", c, &reports))?;
    write_atomic(&c.out.join("simulation.csv"), &csv_bytes(&reports, &SIMULATION_COLUMNS)?)?;
    for r in &reports {
        println!(
            "{:<18} n {:>6}  B {:>4}  hit {:.4}  {:>9.2} tok/s  attn {:.3}",
            r.policy.name(),
            r.n,
            r.batch,
            r.hit_rate,
            r.tokens_per_s,
            r.attn_ratio
        );
    }
    Ok(Outcome::Ok)
}

/// Attended KV bytes per sequence and step across all layers.
pub fn attended_bytes(c: &ExperimentConfig) -> f64 {
    let a = c.attention();
    let tokens = a.topk_blocks() * a.n_b + a.n_s + a.n_w;
    (2 * tokens * c.d_head * c.element_width * c.n_kv_head * c.n_layers) as f64
}

fn curve(loaded: &LoadedConfig, intervals: usize) -> Result<Outcome, CliError> {
    let c = &loaded.config;
    let batch = c
        .batch
        .ok_or_else(|| CliError::Usage("curve needs `batch`".into()))?;
    let params = c.cost_params()?;
    let points = throughput_curve(&uniform_grid(intervals), batch, attended_bytes(c), &params)
        .map_err(CliError::failed)?;
    let mut csv = Vec::new();
    write_curve_csv(&points, &mut csv).map_err(|e| CliError::io(&c.out, e))?;
    write_atomic(&c.out.join("curve.csv"), &csv)?;
    write_json(&c.out.join("curve.json"), &Envelope::new("curve", c, &points))?;
    println!("{} points, {:.2} to {:.2} tok/s", points.len(), points[0].tokens_per_s, points[points.len() - 1].tokens_per_s);
    Ok(Outcome::Ok)
}

fn report_cmd(inputs: &[PathBuf], out: &Path) -> Result<Outcome, CliError> {
    let rows = merge(inputs.iter().map(|p| read_rows(p)).collect::<Result<_, _>>()?);
    let experiment = ExperimentConfig {
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    write_atomic(&out.join("summary.csv"), &csv_bytes(&rows, &SUMMARY_COLUMNS)?)?;
    write_json(&out.join("summary.json"), &Envelope::new("summary", &experiment, &rows))?;
    println!("{} rows from {} inputs", rows.len(), inputs.len());
    Ok(Outcome::Ok)
}
