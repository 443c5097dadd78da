//! Command-line driver.
//!
//! Exit codes: 0 success, 1 invariant breach or failed check, 2 bad
//! configuration (unknown scenario, invalid flags or config file).

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use ilempc_core::dynamics::Extension;
use ilempc_core::scenario::{
    make_scenario, oracle_long_horizon, oracle_optimal_reachable, SCENARIO_NAMES,
};
use ilempc_core::Error;

use crate::checks::property_checks;
use crate::config::Overrides;
use crate::formats;
use crate::report::aggregate;
use crate::run::{prepare, run_verbose, write_outputs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_BREACH: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ilempc",
    version,
    about = "Iterative learning economic MPC benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the learning loop and write CSVs and a report.
    Run {
        /// One or more of the scenario names (see `ilempc list`).
        #[arg(required = true)]
        scenarios: Vec<String>,
        #[command(flatten)]
        overrides: OverrideArgs,
        /// Output directory; each scenario writes to DIR/<scenario>.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Scenarios run at the same time.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run a scenario and its invariant and property checks.
    Verify {
        scenario: String,
        #[command(flatten)]
        overrides: OverrideArgs,
        /// Also write the run's outputs here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the scenario's oracle problem: the long-horizon problem for
    /// steady-state scenarios, the best periodic trajectory for trackers.
    Oracle {
        scenario: String,
        /// Horizon of the long-horizon problem (defaults to T_sim).
        #[arg(long)]
        length: Option<usize>,
        /// Write the oracle trajectory to DIR/oracle.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise the learning_summary.csv files under DIR.
    Report { dir: PathBuf },
    /// List the scenario names.
    List,
}

#[derive(Debug, Clone, Default, Args)]
pub struct OverrideArgs {
    /// Number of learning iterations J.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Prediction horizon N.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Closed-loop steps per iteration.
    #[arg(long)]
    pub tsim: Option<usize>,
    /// Write per-solve solver traces.
    #[arg(long)]
    pub trace: bool,
    /// Scale of the base set Y0 of the average constraint.
    #[arg(long)]
    pub y0_scale: Option<f64>,
    /// Key-value file of further overrides; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl OverrideArgs {
    fn resolve(&self) -> Result<Overrides, String> {
        let file = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| format!("{}: {e}", path.display()))?;
                Overrides::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => Overrides::default(),
        };
        let flags = Overrides {
            iterations: self.iters,
            horizon: self.horizon,
            t_sim: self.tsim,
            y0_scale: self.y0_scale,
            trace: self.trace.then_some(true),
            ..Default::default()
        };
        Ok(file.overlay(&flags))
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::UnknownScenario(_) | Error::InvalidConfig(_) | Error::DimensionMismatch { .. } => {
            EXIT_CONFIG
        }
        _ => EXIT_BREACH,
    }
}

fn fail(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

/// Runs one scenario end to end; returns the exit code.
fn run_one(name: &str, overrides: &Overrides, dir: &Path) -> i32 {
    let prepared = match prepare(name, overrides) {
        Ok(p) => p,
        Err(e) => return fail(&e),
    };
    let out = match run_verbose(prepared) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    let checks = property_checks(&out);
    if let Err(e) = write_outputs(&out, &checks, dir) {
        eprintln!("error: writing {}: {e}", dir.display());
        return EXIT_BREACH;
    }
    let last = out.last();
    println!(
        "{name}: j={} J={:.10} window_avg={:.10} converged_at={} -> {}",
        last.j,
        last.cumulative_cost,
        last.window_average,
        out.convergence
            .converged_at
            .map_or("none".into(), |j| j.to_string()),
        dir.display()
    );
    EXIT_OK
}

fn run_many(scenarios: &[String], overrides: &Overrides, out: &Path, jobs: usize) -> i32 {
    // Unknown names are a configuration error before anything runs.
    for name in scenarios {
        if let Err(e) = make_scenario(name) {
            return fail(&e);
        }
    }
    let next = AtomicUsize::new(0);
    let worst = Mutex::new(EXIT_OK);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, scenarios.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(name) = scenarios.get(i) else { break };
                let code = run_one(name, overrides, &out.join(name));
                let mut w = worst.lock().expect("exit code lock");
                *w = (*w).max(code);
            });
        }
    });
    worst.into_inner().expect("exit code lock")
}

fn verify(name: &str, overrides: &Overrides, out: Option<&Path>) -> i32 {
    let prepared = match prepare(name, overrides) {
        Ok(p) => p,
        Err(e) => return fail(&e),
    };
    let result = match run_verbose(prepared) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    let checks = property_checks(&result);
    if let Some(dir) = out {
        if let Err(e) = write_outputs(&result, &checks, dir) {
            eprintln!("error: writing {}: {e}", dir.display());
            return EXIT_BREACH;
        }
    }
    for c in &checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    if checks.iter().all(|c| c.passed) {
        EXIT_OK
    } else {
        EXIT_BREACH
    }
}

fn oracle(name: &str, length: Option<usize>, out: Option<&Path>) -> i32 {
    let scenario = match make_scenario(name) {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    let result = if scenario.reference.is_some() {
        oracle_optimal_reachable(&scenario)
    } else {
        oracle_long_horizon(&scenario, length.unwrap_or(scenario.t_sim))
    };
    let result = match result {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    let kind = match result.trajectory.extension() {
        Extension::Periodic { period } => format!("optimal periodic trajectory, period {period}"),
        _ => format!("long-horizon optimum, T={}", result.trajectory.len()),
    };
    println!(
        "{name}: {kind}: objective {:.15} ({:?})",
        result.objective, result.solution.status
    );
    if let Some(dir) = out {
        let written = std::fs::create_dir_all(dir).and_then(|_| {
            let f = std::fs::File::create(dir.join("oracle.csv"))?;
            formats::write_trajectory(std::io::BufWriter::new(f), &result.trajectory)
        });
        if let Err(e) = written {
            eprintln!("error: writing {}: {e}", dir.display());
            return EXIT_BREACH;
        }
    }
    EXIT_OK
}

pub fn execute(cli: Cli) -> i32 {
    match cli.command {
        Command::List => {
            for name in SCENARIO_NAMES {
                println!("{name}");
            }
            EXIT_OK
        }
        Command::Report { dir } => match aggregate(&dir) {
            Ok(table) => {
                print!("{table}");
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_CONFIG
            }
        },
        Command::Oracle {
            scenario,
            length,
            out,
        } => oracle(&scenario, length, out.as_deref()),
        Command::Run {
            scenarios,
            overrides,
            out,
            jobs,
        } => match overrides.resolve() {
            Ok(o) => run_many(&scenarios, &o, &out, jobs),
            Err(msg) => {
                eprintln!("error: {msg}");
                EXIT_CONFIG
            }
        },
        Command::Verify {
            scenario,
            overrides,
            out,
        } => match overrides.resolve() {
            Ok(o) => verify(&scenario, &o, out.as_deref()),
            Err(msg) => {
                eprintln!("error: {msg}");
                EXIT_CONFIG
            }
        },
    }
}

pub fn main() -> i32 {
    execute(Cli::parse())
}
