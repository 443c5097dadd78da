//! Invariant and property checks over a finished run.

use std::sync::Arc;

use ilempc_core::analysis::check_receding_horizon_optimality;
use ilempc_core::average::{asymptotic_average, closed_form_offset, AVERAGE_SLACK};
use ilempc_core::dynamics::Extension;
use ilempc_core::scenario::Metric;
use ilempc_core::{check_feasible, Solver, StageCost};

use crate::run::RunOutput;

pub const CUMULATIVE_SLACK: f64 = 1e-6;
pub const AVERAGE_MONOTONE_SLACK: f64 = 1e-4;
pub const TERMINAL_TOL: f64 = 1e-6;
pub const SUMMED_TOL: f64 = 1e-6;
pub const OFFSET_IDENTITY_TOL: f64 = 1e-9;
pub const DESCENT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// Largest rise between consecutive iterations of the compared metric.
pub fn worst_rise(out: &RunOutput) -> (f64, Option<usize>) {
    let value = |j: usize| match out.scenario.metric {
        Metric::Cumulative => out.records[j].cumulative_cost,
        Metric::Average => out.records[j].window_average,
    };
    let mut worst = (f64::NEG_INFINITY, None);
    for j in 1..out.records.len() {
        let rise = value(j) - value(j - 1);
        if rise > worst.0 {
            worst = (rise, Some(j));
        }
    }
    worst
}

pub fn monotone_slack(metric: Metric) -> f64 {
    match metric {
        Metric::Cumulative => CUMULATIVE_SLACK,
        Metric::Average => AVERAGE_MONOTONE_SLACK,
    }
}

/// Largest `|recorded offset - closed form|` over every logged step.
pub fn offset_identity_error(out: &RunOutput) -> Option<f64> {
    let spec = out.cfg.average.as_ref()?;
    let mut worst = 0.0_f64;
    for j in 1..out.records.len() {
        let prev = &out.records[j - 1].trajectory;
        let cur = &out.records[j].trajectory;
        for s in &out.records[j].average_log {
            let direct =
                closed_form_offset(prev, cur, spec.map.as_ref(), out.cfg.horizon, s.k).ok()?;
            for (a, b) in s.offset.iter().zip(&direct) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Some(worst)
}

pub fn property_checks(out: &RunOutput) -> Vec<Check> {
    let model = out.scenario.model();
    let mut checks = Vec::new();
    let learned = &out.records[1..];

    let init = check_feasible(&out.records[0].trajectory, model, out.cfg.solver.eps_feas);
    checks.push(Check::new(
        "initial trajectory feasible",
        init.feasible,
        format!(
            "dynamics {:.1e}, boxes {:.1e}",
            init.max_dynamics_residual,
            init.max_box_violation()
        ),
    ));

    let worst_feas = learned
        .iter()
        .map(|r| {
            let f = check_feasible(&r.trajectory, model, out.cfg.solver.eps_feas);
            (
                f.feasible,
                f.max_dynamics_residual.max(f.max_box_violation()),
            )
        })
        .fold((true, 0.0_f64), |a, b| (a.0 && b.0, a.1.max(b.1)));
    checks.push(Check::new(
        "closed-loop trajectories feasible",
        worst_feas.0,
        format!("worst residual {:.1e}", worst_feas.1),
    ));

    let terminal = learned
        .iter()
        .map(|r| r.max_terminal_residual)
        .fold(0.0, f64::max);
    checks.push(Check::new(
        "terminal residual",
        terminal <= TERMINAL_TOL,
        format!("max {terminal:.1e} (limit {TERMINAL_TOL:.0e})"),
    ));

    let (rise, at) = worst_rise(out);
    let slack = monotone_slack(out.scenario.metric);
    checks.push(Check::new(
        "iteration monotonicity",
        rise <= slack,
        format!(
            "largest rise {rise:.3e} at j={} (slack {slack:.0e}, {})",
            at.map_or("-".into(), |j| j.to_string()),
            match out.scenario.metric {
                Metric::Cumulative => "cumulative cost",
                Metric::Average => "window average",
            }
        ),
    ));

    let descent = learned
        .iter()
        .map(|r| r.max_descent_gap)
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check::new(
        "per-step descent inequality",
        descent <= DESCENT_TOL,
        format!("worst gap {descent:.1e} (limit {DESCENT_TOL:.0e})"),
    ));

    if let Some(spec) = &out.cfg.average {
        let summed = learned
            .iter()
            .map(|r| r.max_summed_residual)
            .fold(0.0, f64::max);
        checks.push(Check::new(
            "summed-output residual",
            summed <= SUMMED_TOL,
            format!("max {summed:.1e} (limit {SUMMED_TOL:.0e})"),
        ));
        let identity = offset_identity_error(out).unwrap_or(f64::INFINITY);
        checks.push(Check::new(
            "offset recursion matches closed form",
            identity <= OFFSET_IDENTITY_TOL,
            format!("max {identity:.1e} (limit {OFFSET_IDENTITY_TOL:.0e})"),
        ));
        let mut worst = 0.0_f64;
        let mut finals = Vec::new();
        for r in learned {
            let values: Vec<f64> = r
                .average_log
                .iter()
                .flat_map(|s| s.h_applied.clone())
                .collect();
            match asymptotic_average(&values, spec.output_dim(), &spec.target, AVERAGE_SLACK) {
                Ok(rep) => {
                    worst = worst.max(rep.violation);
                    finals.push(rep.final_average[0]);
                }
                Err(_) => worst = f64::INFINITY,
            }
        }
        checks.push(Check::new(
            "final running average within target",
            worst <= AVERAGE_SLACK,
            format!(
                "worst violation {worst:.1e}, last average {:?}",
                finals.last()
            ),
        ));
    }

    let last = out.last();
    let settled = matches!(last.trajectory.extension(), Extension::Hold { .. });
    match (out.convergence.converged_at, out.scenario.metric, settled) {
        (Some(_), Metric::Cumulative, true) => {
            let cost: Arc<dyn StageCost> = out.scenario.cost().clone();
            let result = check_receding_horizon_optimality(
                &last.trajectory,
                out.cfg.horizon,
                cost,
                model,
                0..out.cfg.t_sim,
                &Solver::new(out.cfg.solver.clone()),
            );
            match result {
                Ok(rep) => checks.push(Check::new(
                    "receding-horizon optimality",
                    rep.verdict,
                    format!(
                        "max improvement {:.1e} over {} windows",
                        rep.max_improvement,
                        rep.windows.len()
                    ),
                )),
                Err(e) => checks.push(Check::new(
                    "receding-horizon optimality",
                    false,
                    e.to_string(),
                )),
            }
        }
        _ => checks.push(Check::new(
            "receding-horizon optimality",
            true,
            "skipped: needs a converged finite-cost run".into(),
        )),
    }
    checks
}
