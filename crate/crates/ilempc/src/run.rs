//! Running a scenario and writing its output directory.

use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::Path;
use std::time::Instant;

use ilempc_core::analysis::{iteration_convergence, ConvergenceReport};
use ilempc_core::average::AverageConstraintSpec;
use ilempc_core::controller::{run_learning_with, ControllerConfig, IterationRecord};
use ilempc_core::scenario::{generate_initial_trajectory, make_scenario, Scenario};
use ilempc_core::{BoxSet, Error, Result};

use crate::config::Overrides;
use crate::formats;

/// A scenario with overrides applied, ready to run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub cfg: ControllerConfig,
}

pub fn prepare(name: &str, o: &Overrides) -> Result<Prepared> {
    let mut scenario = make_scenario(name)?;
    if let Some(n) = o.horizon {
        scenario = scenario.with_horizon(n)?;
    }
    if let Some(t) = o.t_sim {
        scenario.t_sim = t;
        scenario.set_param("T_sim", t.to_string());
    }
    if let Some(j) = o.iterations {
        scenario.iterations = j;
        scenario.set_param("J_max", j.to_string());
    }
    if let Some(s) = o.y0_scale {
        let spec = scenario.average.clone().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "scenario `{name}` has no average constraint to scale"
            ))
        })?;
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "Y0 scale must be positive, got {s}"
            )));
        }
        let base = BoxSet::new(
            spec.base.lower().iter().map(|v| v * s).collect(),
            spec.base.upper().iter().map(|v| v * s).collect(),
        )?;
        scenario.set_param("Y0", format!("{:?}..{:?}", base.lower(), base.upper()));
        scenario.average = Some(AverageConstraintSpec::new(
            spec.map.clone(),
            spec.target.clone(),
            base,
        )?);
    }
    let mut cfg = scenario.controller_config();
    if let Some(w) = o.window_fraction {
        cfg.window_fraction = w;
    }
    if let Some(v) = o.periodic_gap_tol {
        cfg.periodic_gap_tol = v;
    }
    let s = &mut cfg.solver;
    if let Some(v) = o.eps_kkt {
        s.eps_kkt = v;
    }
    if let Some(v) = o.eps_eq {
        s.eps_eq = v;
    }
    if let Some(v) = o.eps_feas {
        s.eps_feas = v;
    }
    if let Some(v) = o.max_outer {
        s.max_outer = v;
    }
    if let Some(v) = o.max_inner {
        s.max_inner = v;
    }
    if let Some(v) = o.max_inner_total {
        s.max_inner_total = v;
    }
    if let Some(v) = o.multiplier_init {
        s.multiplier_init = v;
    }
    if let Some(v) = o.trace {
        s.trace = v;
    }
    cfg.validate()?;
    Ok(Prepared { scenario, cfg })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario: Scenario,
    pub cfg: ControllerConfig,
    /// `records[0]` is the initial trajectory.
    pub records: Vec<IterationRecord>,
    pub convergence: ConvergenceReport,
}

impl RunOutput {
    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("at least the initial record")
    }
}

/// Generates the initial trajectory and runs the learning loop.
pub fn run<F: FnMut(&IterationRecord)>(prepared: Prepared, on_record: F) -> Result<RunOutput> {
    let Prepared { scenario, cfg } = prepared;
    let initial = generate_initial_trajectory(&scenario)?;
    let records = run_learning_with(&scenario.task, &initial, &cfg, on_record)?;
    let convergence =
        iteration_convergence(&records, scenario.model(), cfg.t_sim, scenario.metric)?;
    Ok(RunOutput {
        scenario,
        cfg,
        records,
        convergence,
    })
}

/// Runs with one progress line per iteration on stderr.
pub fn run_verbose(prepared: Prepared) -> Result<RunOutput> {
    let name = prepared.scenario.name;
    let start = Instant::now();
    run(prepared, |r| {
        eprintln!(
            "[{name}] j={:<3} J={:.10} window_avg={:.10} terminal={:.1e} outer={} ({:.1} s)",
            r.j,
            r.cumulative_cost,
            r.window_average,
            r.max_terminal_residual,
            r.stats.outer_total,
            start.elapsed().as_secs_f64()
        )
    })
}

fn create(dir: &Path, name: &str) -> io::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes `iter_<j>.csv`, `learning_summary.csv`, `average_constraint.csv`
/// (with an average constraint), `trace_<j>.csv` (when tracing) and
/// `analysis_report.json` into `dir`.
pub fn write_outputs(
    out: &RunOutput,
    checks: &[crate::checks::Check],
    dir: &Path,
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for r in &out.records {
        formats::write_trajectory(create(dir, &format!("iter_{}.csv", r.j))?, &r.trajectory)?;
        if out.cfg.solver.trace && r.j > 0 {
            formats::write_trace(create(dir, &format!("trace_{}.csv", r.j))?, r)?;
        }
    }
    formats::write_summary(create(dir, "learning_summary.csv")?, &out.records)?;
    if out.cfg.average.is_some() {
        formats::write_average_log(create(dir, "average_constraint.csv")?, &out.records)?;
    }
    let report = crate::report::analysis_report(out, checks);
    let mut text = serde_json::to_string_pretty(&report).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(dir.join("analysis_report.json"), text)
}
