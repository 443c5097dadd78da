//! `analysis_report.json` and the `report` table.
//!
//! Report schema (all floats are JSON numbers, non-finite ones are `null`):
//!
//! ```text
//! scenario            name
//! parameters          { name: value } restating every scenario parameter
//! metric              "cumulative" | "average"
//! estimators          window [from, to), stored length, how limits are estimated
//! iterations[]        j, cumulative_cost, window_average, full_average,
//!                     limsup_estimate, liminf_estimate, max_terminal_residual,
//!                     max_summed_residual, max_descent_gap, solves,
//!                     outer_total, inner_total, max_iter_solves
//! convergence         state_tol, cost_tol, state_distance[], cost_change[], converged_at
//! average_constraint  target, base, final_average[] per iteration,
//!                     offset_identity_error (absent without the constraint)
//! checks[]            name, passed, detail
//! assumptions[]       modelling assumptions the verdicts rely on
//! ```

use std::fs;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};

use ilempc_core::analysis::{window_average, CONVERGENCE_COST_TOL, CONVERGENCE_STATE_TOL};
use ilempc_core::scenario::Metric;
use serde_json::{json, Value};

use crate::checks::{offset_identity_error, Check};
use crate::formats::read_summary;
use crate::run::RunOutput;

fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

pub fn analysis_report(out: &RunOutput, checks: &[Check]) -> Value {
    let (w0, w1) = out.cfg.window();
    let cost = out.scenario.cost().as_ref();
    let iterations: Vec<Value> = out
        .records
        .iter()
        .map(|r| {
            let limits = window_average(&r.trajectory, cost, w0, w1).ok();
            json!({
                "j": r.j,
                "cumulative_cost": num(r.cumulative_cost),
                "window_average": num(r.window_average),
                "full_average": num(r.full_average),
                "limsup_estimate": num(limits.as_ref().map_or(f64::NAN, |l| l.limsup_estimate)),
                "liminf_estimate": num(limits.as_ref().map_or(f64::NAN, |l| l.liminf_estimate)),
                "max_terminal_residual": num(r.max_terminal_residual),
                "max_summed_residual": num(r.max_summed_residual),
                "max_descent_gap": num(r.max_descent_gap),
                "solves": r.stats.solves,
                "outer_total": r.stats.outer_total,
                "inner_total": r.stats.inner_total,
                "max_iter_solves": r.stats.max_iter_solves,
            })
        })
        .collect();
    let parameters: serde_json::Map<String, Value> = out
        .scenario
        .parameters
        .iter()
        .map(|(k, v)| (k.clone(), json!(v)))
        .collect();
    let average = out.cfg.average.as_ref().map(|spec| {
        let finals: Vec<Value> = out
            .records
            .iter()
            .skip(1)
            .map(|r| json!(r.average_log.last().map(|s| s.running_average.clone())))
            .collect();
        json!({
            "target": [spec.target.lower(), spec.target.upper()],
            "base": [spec.base.lower(), spec.base.upper()],
            "final_average": finals,
            "offset_identity_error": num(offset_identity_error(out).unwrap_or(f64::NAN)),
        })
    });
    let c = &out.convergence;
    json!({
        "scenario": out.scenario.name,
        "parameters": parameters,
        "metric": match out.scenario.metric { Metric::Cumulative => "cumulative", Metric::Average => "average" },
        "estimators": {
            "window": [w0, w1],
            "stored_length": out.last().trajectory.len(),
            "cumulative": "sum of stage costs over the stored trajectory; the steady-state tail adds zero",
            "limits": "limsup / liminf estimated by the max / min running average over the last half of [0, T_sim)",
        },
        "iterations": iterations,
        "convergence": {
            "state_tol": CONVERGENCE_STATE_TOL,
            "cost_tol": CONVERGENCE_COST_TOL,
            "state_distance": c.state_distance.iter().map(|v| num(*v)).collect::<Vec<_>>(),
            "cost_change": c.cost_change.iter().map(|v| num(*v)).collect::<Vec<_>>(),
            "converged_at": c.converged_at,
        },
        "average_constraint": average,
        "checks": checks.iter().map(|k| json!({"name": k.name, "passed": k.passed, "detail": k.detail})).collect::<Vec<_>>(),
        "assumptions": [
            "each finite-horizon problem has a unique minimiser, so learned trajectories are compared as points",
            "dissipativity checks are sampled on grids and are not certificates",
        ],
    })
}

fn summaries(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let direct = dir.join("learning_summary.csv");
    if direct.is_file() {
        found.push(direct);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let file = sub.join("learning_summary.csv");
        if file.is_file() {
            found.push(file);
        }
    }
    Ok(found)
}

/// One line per run directory found in `dir` (itself or its children).
pub fn aggregate(dir: &Path) -> io::Result<String> {
    let files = summaries(dir)?;
    if files.is_empty() {
        return Err(io::Error::new(
            io::ErrorKind::NotFound,
            format!("no learning_summary.csv under {}", dir.display()),
        ));
    }
    let mut table = format!(
        "{:<24} {:>5} {:>20} {:>16} {:>12} {:>10}\n",
        "run", "iters", "J_final", "window_avg", "max_term", "outer"
    );
    for file in files {
        let rows = read_summary(BufReader::new(fs::File::open(&file)?))?;
        let name = file
            .parent()
            .and_then(|p| p.file_name())
            .map_or_else(|| ".".into(), |n| n.to_string_lossy().into_owned());
        let last = rows.last().ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{} is empty", file.display()),
            )
        })?;
        let max_term = rows
            .iter()
            .map(|r| r.max_terminal_residual)
            .fold(0.0, f64::max);
        let outer: usize = rows.iter().map(|r| r.outer_total).sum();
        table.push_str(&format!(
            "{:<24} {:>5} {:>20.10} {:>16.10} {:>12.1e} {:>10}\n",
            name, last.j, last.cumulative_cost, last.window_average, max_term, outer
        ));
    }
    Ok(table)
}
