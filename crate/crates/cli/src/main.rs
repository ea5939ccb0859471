#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use qnum_core::metrics::{write_summary, RunOutput};
use qnum_core::scenario::{
    failure_output, oracle_compare, run_scenario, stability_check, sweep_csv, sweep_runs_csv, upper_bound, Scenario,
    ScenarioError, SweepAxis, SweepRun,
};

const EXIT_VALIDATION: u8 = 2;
const EXIT_BLOWUP: u8 = 3;
const EXIT_NONCONVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "qnum", version, about = "Primal-dual entanglement distribution simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, env = "QPD_OUT_DIR", default_value = "qnum-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation.
    Run {
        #[command(flatten)]
        common: Common,
        /// Seed (defaults to the first seed in the scenario).
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated seconds (overrides the scenario).
        #[arg(long)]
        duration: Option<f64>,
        /// Exit with status 4 if the aggregate does not converge.
        #[arg(long)]
        require_convergence: bool,
    },
    /// Run a parameter sweep over seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// link_length_km, n_sessions, T_outer, T_c or variant.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Comma-separated seeds (defaults to the scenario's).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Single seed (shorthand for --seeds N).
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        duration: Option<f64>,
        /// Exit with status 4 if any run fails to converge.
        #[arg(long)]
        require_convergence: bool,
    },
    /// Lyapunov and linearization analysis of the primal-dual dynamics.
    StabilityCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Analyze SKR or negativity utilities too.
        #[arg(long)]
        allow_nonconcave: bool,
    },
    /// Compare the centralized solver with the grid oracle.
    OracleCompare {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Parse and validate a scenario.
    Validate {
        scenario: PathBuf,
    },
    /// Print the centralized optimum of a scenario.
    UpperBound {
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load(path: &Path) -> Result<Scenario, ExitCode> {
    Scenario::load(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(EXIT_VALIDATION)
    })
}

fn write_output(dir: &Path, out: &RunOutput) -> anyhow::Result<()> {
    out.write_dir(dir).with_context(|| format!("writing {}", dir.display()))
}

fn exit_for(err: &ScenarioError) -> u8 {
    match err {
        ScenarioError::Protocol(qnum_core::protocol::ProtocolError::BlowUp { .. })
        | ScenarioError::Stability(qnum_core::stability::StabilityError::BlowUp { .. }) => EXIT_BLOWUP,
        ScenarioError::Qnum(qnum_core::qnum::QnumError::NonConvergence { .. }) => EXIT_NONCONVERGENCE,
        _ => EXIT_VALIDATION,
    }
}

/// Reports a driver error, writing a failure summary first.
fn fail(dir: &Path, err: ScenarioError) -> anyhow::Result<ExitCode> {
    let code = exit_for(&err);
    let status = match code {
        EXIT_BLOWUP => "blowup",
        EXIT_NONCONVERGENCE => "did_not_converge",
        _ => "invalid",
    };
    write_output(dir, &failure_output(status, &err.to_string()))?;
    eprintln!("error: {err}");
    Ok(ExitCode::from(code))
}

fn cmd_run(common: Common, seed: Option<u64>, duration: Option<f64>, require: bool) -> anyhow::Result<ExitCode> {
    let sc = match load(&common.scenario) {
        Ok(sc) => sc,
        Err(code) => {
            write_output(&common.out, &failure_output("invalid", "scenario failed validation"))?;
            return Ok(code);
        }
    };
    if duration.is_some_and(|d| !(d > 0.0)) {
        eprintln!("error: --duration must be positive");
        return Ok(ExitCode::from(EXIT_VALIDATION));
    }
    let seed = seed.unwrap_or(sc.run.seeds[0]);
    let result = match run_scenario(&sc, seed, duration) {
        Ok(r) => r,
        Err(e) => return fail(&common.out, e),
    };
    let mut out = result.output.clone();
    let converged = result.convergence(sc.metrics.primary).is_converged();
    if let Some(name) = &sc.name {
        out.summary.set("scenario", name);
    }
    if require && !converged && result.blowup.is_none() {
        out.summary.set("status", "did_not_converge");
    }
    write_output(&common.out, &out)?;
    print!("{}", out.summary.to_csv());
    if let Some(b) = &result.blowup {
        eprintln!("numeric blow-up: {b}\nlast events:");
        for line in &result.trace_tail {
            eprintln!("  {line}");
        }
        return Ok(ExitCode::from(EXIT_BLOWUP));
    }
    if require && !converged {
        eprintln!("aggregate did not converge");
        return Ok(ExitCode::from(EXIT_NONCONVERGENCE));
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    common: Common,
    axis: &str,
    values: Vec<String>,
    seeds: Vec<u64>,
    seed: Option<u64>,
    jobs: usize,
    duration: Option<f64>,
    require: bool,
) -> anyhow::Result<ExitCode> {
    let sc = match load(&common.scenario) {
        Ok(sc) => sc,
        Err(code) => return Ok(code),
    };
    let axis: SweepAxis = match axis.parse() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(EXIT_VALIDATION));
        }
    };
    let values: Vec<String> = values.into_iter().map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        eprintln!("error: --values is empty");
        return Ok(ExitCode::from(EXIT_VALIDATION));
    }
    let seeds = match (seed, seeds.is_empty()) {
        (Some(s), _) => vec![s],
        (None, true) => sc.run.seeds.clone(),
        (None, false) => seeds,
    };
    let mut points = Vec::new();
    for v in &values {
        match sc.with_axis(axis, v) {
            Ok(p) => points.push((v.clone(), p)),
            Err(e) => {
                eprintln!("error: {e}");
                return Ok(ExitCode::from(EXIT_VALIDATION));
            }
        }
    }
    let tasks: Vec<(usize, u64)> = (0..points.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let runs: Vec<SweepRun> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(i, seed)| {
                let (value, p) = &points[i];
                match run_scenario(p, seed, duration) {
                    Ok(r) => SweepRun::from_result(value, seed, &r, p.metrics.primary),
                    Err(e) => SweepRun::failed(value, seed, if exit_for(&e) == EXIT_BLOWUP { "blowup" } else { "error" }),
                }
            })
            .collect()
    });
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(common.out.join("sweep_runs.csv"), sweep_runs_csv(axis, &runs))?;
    let table = sweep_csv(axis, &runs);
    std::fs::write(common.out.join("sweep.csv"), &table)?;
    let mut summary = qnum_core::metrics::Summary::default();
    let blowups = runs.iter().filter(|r| r.status == "blowup").count();
    let unconverged = runs.iter().filter(|r| !r.convergence.is_converged()).count();
    summary.set("status", if blowups > 0 { "blowup" } else { "ok" });
    summary.set("axis", axis.name());
    summary.set("runs", runs.len());
    summary.set("blowups", blowups);
    summary.set("unconverged", unconverged);
    write_summary(&common.out, &summary)?;
    print!("{table}");
    if blowups > 0 {
        return Ok(ExitCode::from(EXIT_BLOWUP));
    }
    if require && unconverged > 0 {
        return Ok(ExitCode::from(EXIT_NONCONVERGENCE));
    }
    Ok(ExitCode::SUCCESS)
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { common, seed, duration, require_convergence } => {
            cmd_run(common, seed, duration, require_convergence)
        }
        Command::Sweep { common, axis, values, seeds, seed, jobs, duration, require_convergence } => {
            cmd_sweep(common, &axis, values, seeds, seed, jobs, duration, require_convergence)
        }
        Command::StabilityCheck { common, seed, allow_nonconcave } => {
            let sc = match load(&common.scenario) {
                Ok(sc) => sc,
                Err(code) => return Ok(code),
            };
            match stability_check(&sc, allow_nonconcave, seed) {
                Ok(report) => {
                    let s = report.to_summary();
                    write_summary(&common.out, &s)?;
                    print!("{}", s.to_csv());
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => fail(&common.out, e),
            }
        }
        Command::OracleCompare { common, seed } => {
            let sc = match load(&common.scenario) {
                Ok(sc) => sc,
                Err(code) => return Ok(code),
            };
            match oracle_compare(&sc, seed) {
                Ok(report) => {
                    let s = report.to_summary();
                    write_summary(&common.out, &s)?;
                    print!("{}", s.to_csv());
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => fail(&common.out, e),
            }
        }
        Command::Validate { scenario } => match load(&scenario) {
            Ok(sc) => {
                println!("ok: {}", sc.name.as_deref().unwrap_or("unnamed scenario"));
                Ok(ExitCode::SUCCESS)
            }
            Err(code) => Ok(code),
        },
        Command::UpperBound { scenario, seed } => {
            let sc = match load(&scenario) {
                Ok(sc) => sc,
                Err(code) => return Ok(code),
            };
            let (sol, abs) = match upper_bound(&sc, seed) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("error: {e}");
                    return Ok(ExitCode::from(exit_for(&e)));
                }
            };
            println!("utility,{}", sol.utility);
            println!("aggregate_{},{}", sc.metrics.primary, abs);
            println!("iterations,{}", sol.iterations);
            if abs.is_nan() {
                bail!("upper bound is not a number");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
