//! The learning loop.
//!
//! At time `k` of iteration `j` the controller solves an `N`-step problem
//! from the measured state whose terminal state is pinned to the previous
//! iteration's closed-loop state at `k + N`, applies the first control and
//! moves on. The warm start is always the shifted previous solution with the
//! previous iteration's control appended, which is feasible by construction.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::average::{init_offset, AverageConstraintSpec, OffsetSet};
use crate::cost::StageCost;
use crate::dynamics::{check_feasible, Extension, PlantModel, Trajectory, DYNAMICS_TOL};
use crate::error::{check_dim, Error, Result};
use crate::math::{self, CompensatedSum};
use crate::solver::{
    NlpProblem, NlpSolution, SolveStatus, Solver, SolverSettings, TerminalConstraint, TraceEntry,
};

/// How a finished iteration is continued past its stored range.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtensionRule {
    /// Steady-state hold. The last solve's remaining plan is appended so the
    /// stored trajectory ends exactly where the previous one did.
    Hold,
    /// Periodic repetition with the given period.
    Periodic(usize),
    None,
}

/// The repetitive task: plant, stage cost, shared initial state.
#[derive(Clone)]
pub struct Task {
    pub model: PlantModel,
    pub cost: Arc<dyn StageCost>,
    pub x0: Vec<f64>,
    pub extension: ExtensionRule,
}

impl core::fmt::Debug for Task {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Task")
            .field("model", &self.model.name())
            .field("x0", &self.x0)
            .field("extension", &self.extension)
            .finish()
    }
}

impl Task {
    /// The extension to attach to a finished trajectory.
    pub fn extension_for(&self) -> Result<Extension> {
        Ok(match &self.extension {
            ExtensionRule::None => Extension::None,
            ExtensionRule::Periodic(p) => Extension::Periodic { period: *p },
            ExtensionRule::Hold => {
                let ss = self.model.steady_state().ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "plant `{}` declares no steady state to hold",
                        self.model.name()
                    ))
                })?;
                Extension::Hold {
                    state: ss.state.clone(),
                    control: ss.control.clone(),
                }
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub t_sim: usize,
    pub iterations: usize,
    pub solver: SolverSettings,
    pub average: Option<AverageConstraintSpec>,
    /// Fraction of `[0, T_sim)` at the end used for the window average.
    pub window_fraction: f64,
    /// Largest `|x(T) - x(T - P)|` for which a periodic extension is attached.
    pub periodic_gap_tol: f64,
    /// Checks the per-step descent inequality after every solve.
    pub check_descent: bool,
}

impl ControllerConfig {
    pub fn new(horizon: usize, t_sim: usize, iterations: usize) -> Self {
        Self {
            horizon,
            t_sim,
            iterations,
            solver: SolverSettings::default(),
            average: None,
            window_fraction: 0.5,
            periodic_gap_tol: 1e-8,
            check_descent: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon N must be at least 1".into()));
        }
        if self.t_sim < self.horizon {
            return Err(Error::InvalidConfig(format!(
                "simulation length {} is shorter than the horizon {}",
                self.t_sim, self.horizon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig(
                "iteration count must be at least 1".into(),
            ));
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "window fraction must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// `[start, t_sim)` window used for averages.
    pub fn window(&self) -> (usize, usize) {
        let len = (libm::round(self.t_sim as f64 * self.window_fraction) as usize).max(1);
        (self.t_sim - len.min(self.t_sim), self.t_sim)
    }
}

/// Per-step log of the average constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageStep {
    pub k: usize,
    pub h_applied: Vec<f64>,
    /// Offset used by the solve at `k`.
    pub offset: Vec<f64>,
    pub residual: f64,
    pub running_average: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolverStats {
    pub solves: usize,
    pub outer_total: usize,
    pub inner_total: usize,
    pub max_iter_solves: usize,
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub j: usize,
    pub trajectory: Trajectory,
    /// `V*_j(x_j(k))` for each closed-loop step.
    pub values: Vec<f64>,
    /// Warm-start objective at each step.
    pub warm_values: Vec<f64>,
    /// Sum of stage costs over the whole stored trajectory.
    pub cumulative_cost: f64,
    /// Mean stage cost over the configured window of `[0, T_sim)`.
    pub window_average: f64,
    /// Mean stage cost over the whole stored trajectory.
    pub full_average: f64,
    pub max_terminal_residual: f64,
    pub max_summed_residual: f64,
    /// Worst violation of the per-step descent inequality (negative is fine).
    pub max_descent_gap: f64,
    pub stats: SolverStats,
    pub average_log: Vec<AverageStep>,
    /// Per-solve traces, indexed by `k`; empty unless the solver traces.
    pub traces: Vec<Vec<TraceEntry>>,
}

/// Stage-cost sum over steps `[from, to)` of a trajectory (extension allowed).
pub fn cost_sum(traj: &Trajectory, cost: &dyn StageCost, from: usize, to: usize) -> Result<f64> {
    let mut terms = Vec::with_capacity(to.saturating_sub(from));
    for k in from..to {
        let (x, u) = traj.extend_lookup(k)?;
        terms.push(cost.value(k, x, u));
    }
    Ok(math::kahan_sum(terms))
}

/// Problem 1 at time `k`: start at `x_now`, end at the previous iteration's
/// state `k + N`.
pub fn build_problem1(
    task: &Task,
    prev: &Trajectory,
    x_now: &[f64],
    k: usize,
    cfg: &ControllerConfig,
) -> Result<NlpProblem> {
    check_dim(task.model.n(), x_now.len())?;
    let target = prev.lookup_state(k + cfg.horizon)?.to_vec();
    let mut problem = NlpProblem::new(
        task.model.clone(),
        task.cost.clone(),
        cfg.horizon,
        x_now.to_vec(),
    )
    .with_time_offset(k);
    problem.terminal = TerminalConstraint::Fixed(target);
    Ok(problem)
}

/// `(u*(1|k), ..., u*(N-1|k), u_{j-1}(k+N))`, the feasible candidate for `k + 1`.
pub fn shifted_candidate(
    solution: &NlpSolution,
    prev: &Trajectory,
    k: usize,
    horizon: usize,
) -> Result<Vec<f64>> {
    let m = prev.m();
    let mut out = Vec::with_capacity(horizon * m);
    out.extend_from_slice(&solution.controls[m..]);
    out.extend_from_slice(prev.lookup_control(k + horizon)?);
    Ok(out)
}

/// One receding-horizon step: solve from `warm` and return the first control.
pub fn step(
    j: usize,
    k: usize,
    solver: &Solver,
    problem: &NlpProblem,
    warm: &[f64],
) -> Result<(Vec<f64>, NlpSolution)> {
    let solution = solver.solve(problem, warm)?;
    if solution.status == SolveStatus::InfeasibleStart {
        return Err(Error::InvariantBreach {
            j,
            k,
            detail: format!(
                "shifted warm start rejected by the solver ({})",
                solution.diagnostic
            ),
        });
    }
    if solution.warm_feasible && solution.objective > solution.warm_objective + 1e-12 {
        return Err(Error::InvariantBreach {
            j,
            k,
            detail: format!(
                "solver returned {} above the warm-start objective {}",
                solution.objective, solution.warm_objective
            ),
        });
    }
    let m = problem.model.m();
    Ok((solution.controls[..m].to_vec(), solution))
}

/// Runs iteration `j` against the previous iteration's trajectory.
pub fn run_iteration(
    j: usize,
    task: &Task,
    prev: &Trajectory,
    cfg: &ControllerConfig,
) -> Result<IterationRecord> {
    cfg.validate()?;
    let model = &task.model;
    let (n, m, horizon) = (model.n(), model.m(), cfg.horizon);
    let solver = Solver::new(cfg.solver.clone());

    let mut states = Vec::with_capacity((cfg.t_sim + horizon) * n);
    let mut controls = Vec::with_capacity((cfg.t_sim + horizon) * m);
    states.extend_from_slice(&task.x0);
    let mut values = Vec::with_capacity(cfg.t_sim);
    let mut warm_values = Vec::with_capacity(cfg.t_sim);
    let mut stats = SolverStats::default();
    let mut max_terminal = 0.0_f64;
    let mut max_summed = 0.0_f64;
    let mut max_descent_gap = f64::NEG_INFINITY;

    let mut offsets = match &cfg.average {
        Some(spec) => Some(OffsetSet::new(
            spec.base.clone(),
            &init_offset(prev, spec.map.as_ref(), horizon)?,
        )?),
        None => None,
    };
    let mut average_log = Vec::new();
    let mut traces = Vec::new();
    let mut running = CompensatedSum::zeros(cfg.average.as_ref().map_or(0, |s| s.output_dim()));

    let mut warm = prev.control_window(0, horizon)?;
    let mut last_solution: Option<NlpSolution> = None;
    for k in 0..cfg.t_sim {
        let x_now = states[k * n..(k + 1) * n].to_vec();
        let mut problem = build_problem1(task, prev, &x_now, k, cfg)?;
        if let (Some(spec), Some(set)) = (&cfg.average, &offsets) {
            problem = crate::average::attach_to_problem(problem, spec, &set.offset())?;
        }
        let (u, solution) = step(j, k, &solver, &problem, &warm)?;
        stats.solves += 1;
        stats.outer_total += solution.outer_iterations;
        stats.inner_total += solution.inner_iterations;
        if solution.status == SolveStatus::MaxIter {
            stats.max_iter_solves += 1;
        }
        max_terminal = max_terminal.max(solution.terminal_residual);
        max_summed = max_summed.max(solution.summed_residual);

        if cfg.check_descent && k > 0 {
            // V(k) - V(k-1) <= -l(x(k-1), u(k-1)) + l(prev(k-1+N))
            let (xp, up) = prev.extend_lookup(k - 1 + horizon)?;
            let incoming = task.cost.value(k - 1 + horizon, xp, up);
            let applied = task.cost.value(
                k - 1,
                &states[(k - 1) * n..k * n],
                &controls[(k - 1) * m..k * m],
            );
            let gap = solution.objective - values[k - 1] + applied - incoming;
            max_descent_gap = max_descent_gap.max(gap);
        }
        if cfg.solver.trace {
            traces.push(solution.trace.clone());
        }
        values.push(solution.objective);
        warm_values.push(solution.warm_objective);

        let next = model.step(&x_now, &u)?;
        if let (Some(spec), Some(set)) = (&cfg.average, &mut offsets) {
            let h_applied = spec.eval(&x_now, &u);
            running.add(&h_applied);
            let count = (k + 1) as f64;
            average_log.push(AverageStep {
                k,
                h_applied: h_applied.clone(),
                offset: set.offset(),
                residual: solution.summed_residual,
                running_average: running.value().iter().map(|v| v / count).collect(),
            });
            if k + 1 < cfg.t_sim {
                let (xp, up) = prev.extend_lookup(k + horizon)?;
                let h_incoming = spec.eval(xp, up);
                set.update(&h_applied, &h_incoming);
            }
        }
        controls.extend_from_slice(&u);
        states.extend_from_slice(&next);
        if k + 1 < cfg.t_sim {
            warm = shifted_candidate(&solution, prev, k, horizon)?;
        }
        last_solution = Some(solution);
    }

    // Complete the last plan: it ends on the previous iteration's state at
    // T_sim - 1 + N, the furthest index the next iteration reads.
    let plan = last_solution.expect("t_sim >= 1");
    let mut x = states[cfg.t_sim * n..].to_vec();
    for i in 1..horizon {
        let u = plan.control(i, m);
        x = model.step(&x, u)?;
        controls.extend_from_slice(u);
        states.extend_from_slice(&x);
    }
    let end = states.len() / n - 1;
    let settled = model.state_distance(&states[end * n..], prev.lookup_state(end)?);
    if settled > 10.0 * cfg.solver.eps_eq.max(DYNAMICS_TOL) {
        return Err(Error::InvariantBreach {
            j,
            k: end,
            detail: format!("completed plan misses the previous end state by {settled:e}"),
        });
    }
    let trajectory = Trajectory::new(n, m, states, controls, Extension::None)?;
    let trajectory = match task.extension {
        ExtensionRule::Hold => trajectory.with_extension(task.extension_for()?)?,
        // A periodic continuation is only attached when the stored end
        // already repeats; otherwise the stored tail is all the next
        // iteration needs.
        ExtensionRule::Periodic(p) if trajectory.periodic_gap(model, p) <= cfg.periodic_gap_tol => {
            trajectory.with_extension(task.extension_for()?)?
        }
        _ => trajectory,
    };
    let report = check_feasible(&trajectory, model, cfg.solver.eps_feas);
    if !report.feasible {
        return Err(Error::InvariantBreach {
            j,
            k: 0,
            detail: format!(
                "closed-loop trajectory infeasible: dynamics {:e}, boxes {:e}",
                report.max_dynamics_residual,
                report.max_box_violation()
            ),
        });
    }

    let cumulative_cost = cost_sum(&trajectory, task.cost.as_ref(), 0, trajectory.len())?;
    let (w0, w1) = cfg.window();
    let window_average = cost_sum(&trajectory, task.cost.as_ref(), w0, w1)? / (w1 - w0) as f64;
    Ok(IterationRecord {
        j,
        full_average: cumulative_cost / trajectory.len() as f64,
        trajectory,
        values,
        warm_values,
        cumulative_cost,
        window_average,
        max_terminal_residual: max_terminal,
        max_summed_residual: max_summed,
        max_descent_gap,
        stats,
        average_log,
        traces,
    })
}

/// Record for the initial trajectory (`j = 0`); no solves involved.
pub fn initial_record(
    task: &Task,
    initial: &Trajectory,
    cfg: &ControllerConfig,
) -> Result<IterationRecord> {
    let cumulative_cost = cost_sum(initial, task.cost.as_ref(), 0, initial.len())?;
    let (w0, w1) = cfg.window();
    let window_average = cost_sum(initial, task.cost.as_ref(), w0, w1)? / (w1 - w0) as f64;
    Ok(IterationRecord {
        j: 0,
        trajectory: initial.clone(),
        values: Vec::new(),
        warm_values: Vec::new(),
        cumulative_cost,
        window_average,
        full_average: cumulative_cost / initial.len().max(1) as f64,
        max_terminal_residual: 0.0,
        max_summed_residual: 0.0,
        max_descent_gap: f64::NEG_INFINITY,
        stats: SolverStats::default(),
        average_log: Vec::new(),
        traces: Vec::new(),
    })
}

/// Runs `cfg.iterations` iterations from a feasible initial trajectory.
///
/// Only the previous iteration's trajectory is consulted by each iteration.
/// `on_record` sees each record as it is produced; the returned vector
/// starts with the `j = 0` record of the initial trajectory.
pub fn run_learning_with<F: FnMut(&IterationRecord)>(
    task: &Task,
    initial: &Trajectory,
    cfg: &ControllerConfig,
    mut on_record: F,
) -> Result<Vec<IterationRecord>> {
    cfg.validate()?;
    check_dim(task.model.n(), task.x0.len())?;
    if math::dist_inf(initial.state(0), &task.x0) > 1e-12 {
        return Err(Error::InvalidConfig(
            "initial trajectory does not start at x0".into(),
        ));
    }
    let report = check_feasible(initial, &task.model, cfg.solver.eps_feas);
    if !report.feasible {
        return Err(Error::InvalidConfig(format!(
            "initial trajectory is infeasible: dynamics {:e}, boxes {:e}",
            report.max_dynamics_residual,
            report.max_box_violation()
        )));
    }
    let first = initial_record(task, initial, cfg)?;
    on_record(&first);
    let mut records = vec![first];
    for j in 1..=cfg.iterations {
        let prev = &records[j - 1].trajectory;
        let record = run_iteration(j, task, prev, cfg)?;
        on_record(&record);
        records.push(record);
    }
    Ok(records)
}

pub fn run_learning(
    task: &Task,
    initial: &Trajectory,
    cfg: &ControllerConfig,
) -> Result<Vec<IterationRecord>> {
    run_learning_with(task, initial, cfg, |_| {})
}
