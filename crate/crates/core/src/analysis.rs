//! Verification tools: rotated costs and sampled dissipativity checks, the
//! rotated-cost problem equivalence, performance metrics, iteration
//! convergence and the receding-horizon optimality check.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::controller::IterationRecord;
use crate::cost::StageCost;
use crate::dynamics::{rollout, PlantModel, SteadyState, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::math;
use crate::scenario::Metric;
use crate::solver::{InitialCondition, NlpProblem, SolveStatus, Solver, TerminalConstraint};

/// Largest tolerated improvement of a re-solved window for it to count as optimal.
pub const OPTIMALITY_TOL: f64 = 1e-5;
/// Thresholds of [`iteration_convergence`].
pub const CONVERGENCE_STATE_TOL: f64 = 1e-5;
pub const CONVERGENCE_COST_TOL: f64 = 1e-6;
/// Smallest rotated-cost value accepted on the sample grid.
pub const DISSIPATIVITY_TOL: f64 = 1e-8;

/// Storage function `lambda(x)`.
pub trait StorageFunction: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], g: &mut [f64]);
}

impl<S: StorageFunction + ?Sized> StorageFunction for Arc<S> {
    fn value(&self, x: &[f64]) -> f64 {
        (**self).value(x)
    }

    fn gradient(&self, x: &[f64], g: &mut [f64]) {
        (**self).gradient(x, g)
    }
}

/// `lambda = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroStorage;

impl StorageFunction for ZeroStorage {
    fn value(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn gradient(&self, _x: &[f64], g: &mut [f64]) {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `lambda(x) = q'd + d'Pd / 2` with `d = x - center`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticStorage {
    center: Vec<f64>,
    linear: Vec<f64>,
    /// Symmetric, row-major.
    quadratic: Vec<f64>,
}

impl QuadraticStorage {
    pub fn new(center: Vec<f64>, linear: Vec<f64>, quadratic: Vec<f64>) -> Result<Self> {
        let n = center.len();
        check_dim(n, linear.len())?;
        check_dim(n * n, quadratic.len())?;
        let mut quadratic = quadratic;
        for r in 0..n {
            for c in (r + 1)..n {
                let avg = 0.5 * (quadratic[r * n + c] + quadratic[c * n + r]);
                quadratic[r * n + c] = avg;
                quadratic[c * n + r] = avg;
            }
        }
        Ok(Self {
            center,
            linear,
            quadratic,
        })
    }

    /// Linear storage `lambda(x) = q'x`.
    pub fn linear(q: Vec<f64>) -> Self {
        let n = q.len();
        Self {
            center: vec![0.0; n],
            linear: q,
            quadratic: vec![0.0; n * n],
        }
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn linear_part(&self) -> &[f64] {
        &self.linear
    }

    pub fn quadratic_part(&self) -> &[f64] {
        &self.quadratic
    }
}

impl StorageFunction for QuadraticStorage {
    fn value(&self, x: &[f64]) -> f64 {
        let n = self.center.len();
        let mut v = 0.0;
        for i in 0..n {
            let di = x[i] - self.center[i];
            v += self.linear[i] * di;
            for j in 0..n {
                v += 0.5 * di * self.quadratic[i * n + j] * (x[j] - self.center[j]);
            }
        }
        v
    }

    fn gradient(&self, x: &[f64], g: &mut [f64]) {
        let n = self.center.len();
        for i in 0..n {
            g[i] = self.linear[i]
                + (0..n)
                    .map(|j| self.quadratic[i * n + j] * (x[j] - self.center[j]))
                    .sum::<f64>();
        }
    }
}

/// Supply rate `s(x, u) = l(x, u) - l(x_s, u_s)`.
pub fn supply_rate(cost: &dyn StageCost, steady: &SteadyState, x: &[f64], u: &[f64]) -> f64 {
    cost.value(0, x, u) - cost.value(0, &steady.state, &steady.control)
}

/// Rotated stage cost `L(x, u) = l(x, u) - lambda(f(x, u)) + lambda(x)`.
#[derive(Clone)]
pub struct RotatedCost<C, S> {
    cost: C,
    storage: S,
    model: PlantModel,
}

pub fn rotated_cost<C: StageCost, S: StorageFunction>(
    cost: C,
    storage: S,
    model: PlantModel,
) -> RotatedCost<C, S> {
    RotatedCost {
        cost,
        storage,
        model,
    }
}

impl<C: StageCost, S: StorageFunction> StageCost for RotatedCost<C, S> {
    fn value(&self, t: usize, x: &[f64], u: &[f64]) -> f64 {
        let mut next = vec![0.0; x.len()];
        self.model.dynamics().step(x, u, &mut next);
        self.cost.value(t, x, u) - self.storage.value(&next) + self.storage.value(x)
    }

    fn gradient(&self, t: usize, x: &[f64], u: &[f64], gx: &mut [f64], gu: &mut [f64]) {
        let (n, m) = (x.len(), u.len());
        let mut next = vec![0.0; n];
        let mut jx = vec![0.0; n * n];
        let mut ju = vec![0.0; n * m];
        self.model
            .dynamics()
            .step_jacobian(x, u, &mut next, &mut jx, &mut ju);
        self.cost.gradient(t, x, u, gx, gu);
        let mut g_next = vec![0.0; n];
        let mut g_here = vec![0.0; n];
        self.storage.gradient(&next, &mut g_next);
        self.storage.gradient(x, &mut g_here);
        for i in 0..n {
            gx[i] += g_here[i];
        }
        // - A' grad lambda(f), - B' grad lambda(f)
        let neg: Vec<f64> = g_next.iter().map(|v| -v).collect();
        math::add_mat_t_vec(&jx, n, n, &neg, gx);
        math::add_mat_t_vec(&ju, n, m, &neg, gu);
    }
}

/// Uniform grid over a box in `(x, u)` space.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    n: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    counts: Vec<usize>,
}

impl SampleGrid {
    /// `lower`/`upper` cover the stacked `(x, u)` vector; `n` is the state
    /// dimension.
    pub fn new(n: usize, lower: Vec<f64>, upper: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        check_dim(lower.len(), counts.len())?;
        if n > lower.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: n,
            });
        }
        for i in 0..lower.len() {
            if !(lower[i].is_finite() && upper[i].is_finite() && lower[i] <= upper[i])
                || counts[i] == 0
            {
                return Err(Error::InvalidConfig(format!(
                    "grid axis {i} needs finite bounds and a point count"
                )));
            }
        }
        Ok(Self {
            n,
            lower,
            upper,
            counts,
        })
    }

    /// `points` per axis over the model's state and control boxes.
    pub fn over_boxes(model: &PlantModel, points: usize) -> Result<Self> {
        let mut lower = model.state_box().lower().to_vec();
        lower.extend_from_slice(model.control_box().lower());
        let mut upper = model.state_box().upper().to_vec();
        upper.extend_from_slice(model.control_box().upper());
        let dims = lower.len();
        Self::new(model.n(), lower, upper, vec![points; dims])
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spacing per axis (zero on single-point axes).
    pub fn cell(&self) -> Vec<f64> {
        (0..self.counts.len())
            .map(|i| {
                if self.counts[i] > 1 {
                    (self.upper[i] - self.lower[i]) / (self.counts[i] - 1) as f64
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Writes point `index` into `(x, u)`.
    pub fn point(&self, index: usize, x: &mut [f64], u: &mut [f64]) {
        let mut rest = index;
        for axis in 0..self.counts.len() {
            let c = self.counts[axis];
            let i = rest % c;
            rest /= c;
            let v = if c > 1 {
                self.lower[axis] + (self.upper[axis] - self.lower[axis]) * i as f64 / (c - 1) as f64
            } else {
                0.5 * (self.lower[axis] + self.upper[axis])
            };
            if axis < self.n {
                x[axis] = v;
            } else {
                u[axis - self.n] = v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DissipativityReport {
    pub samples: usize,
    pub min_value: f64,
    pub argmin_state: Vec<f64>,
    pub argmin_control: Vec<f64>,
    /// Rotated cost at the steady state.
    pub steady_value: f64,
    /// Whether the grid minimiser lies within one cell of `(x_s, u_s)`.
    pub argmin_near_steady_state: bool,
    pub verdict: bool,
}

impl DissipativityReport {
    pub const SCOPE: &'static str = "sampled on a grid; not a global certificate";
}

/// Sampled check that `(x_s, u_s)` minimises the rotated cost with value
/// zero. `extra` adds samples beyond the grid (for example random points).
pub fn check_dissipativity<C: StageCost, S: StorageFunction>(
    cost: C,
    storage: S,
    model: &PlantModel,
    grid: &SampleGrid,
    extra: &[(Vec<f64>, Vec<f64>)],
) -> Result<DissipativityReport> {
    let steady = model
        .steady_state()
        .ok_or_else(|| {
            Error::InvalidConfig(format!("plant `{}` declares no steady state", model.name()))
        })?
        .clone();
    let (n, m) = (model.n(), model.m());
    let rotated = rotated_cost(cost, storage, model.clone());
    let l_s = rotated.value(0, &steady.state, &steady.control);
    let mut x = vec![0.0; n];
    let mut u = vec![0.0; m];
    let mut best = (f64::INFINITY, vec![0.0; n], vec![0.0; m]);
    let mut consider = |x: &[f64], u: &[f64], v: f64| {
        if v < best.0 {
            best = (v, x.to_vec(), u.to_vec());
        }
    };
    for i in 0..grid.len() {
        grid.point(i, &mut x, &mut u);
        let v = rotated.value(0, &x, &u) - l_s;
        consider(&x, &u, v);
    }
    for (xe, ue) in extra {
        check_dim(n, xe.len())?;
        check_dim(m, ue.len())?;
        consider(xe, ue, rotated.value(0, xe, ue) - l_s);
    }
    consider(&steady.state, &steady.control, 0.0);
    let cell = grid.cell();
    let near = best
        .1
        .iter()
        .chain(&best.2)
        .zip(steady.state.iter().chain(&steady.control))
        .zip(&cell)
        .all(|((a, s), c)| (a - s).abs() <= c + 1e-12);
    let (min_value, argmin_state, argmin_control) = best;
    Ok(DissipativityReport {
        samples: grid.len() + extra.len() + 1,
        min_value,
        argmin_state,
        argmin_control,
        steady_value: l_s,
        argmin_near_steady_state: near,
        verdict: min_value >= -DISSIPATIVITY_TOL && near,
    })
}

/// Least-squares search for a quadratic storage function around the steady
/// state: fits `L(x, u) - l(x_s, u_s)` to `fraction` times the second-order
/// remainder of `l` at `(x_s, u_s)` over the grid. An oracle, not a
/// certificate; check the result with [`check_dissipativity`].
pub fn fit_quadratic_storage<C: StageCost>(
    cost: &C,
    model: &PlantModel,
    grid: &SampleGrid,
    fraction: f64,
) -> Result<QuadraticStorage> {
    let steady = model
        .steady_state()
        .ok_or_else(|| {
            Error::InvalidConfig(format!("plant `{}` declares no steady state", model.name()))
        })?
        .clone();
    let (n, m) = (model.n(), model.m());
    let (xs, us) = (&steady.state, &steady.control);
    let l_s = cost.value(0, xs, us);
    let mut gxs = vec![0.0; n];
    let mut gus = vec![0.0; m];
    cost.gradient(0, xs, us, &mut gxs, &mut gus);

    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let cols = n + pairs.len();
    let rows = grid.len();
    let mut design = Vec::with_capacity(rows * cols);
    let mut rhs = Vec::with_capacity(rows);
    let mut x = vec![0.0; n];
    let mut u = vec![0.0; m];
    let mut next = vec![0.0; n];
    for r in 0..rows {
        grid.point(r, &mut x, &mut u);
        model.dynamics().step(&x, &u, &mut next);
        let dx: Vec<f64> = (0..n).map(|i| x[i] - xs[i]).collect();
        let df: Vec<f64> = (0..n).map(|i| next[i] - xs[i]).collect();
        let du: Vec<f64> = (0..m).map(|i| u[i] - us[i]).collect();
        let excess = cost.value(0, &x, &u) - l_s;
        let remainder = excess - math::dot(&gxs, &dx) - math::dot(&gus, &du);
        // L - l_s = excess + q'(dx - df) + sum_{i<=j} P_ij w_ij (dx_i dx_j - df_i df_j)
        for i in 0..n {
            design.push(dx[i] - df[i]);
        }
        for &(i, j) in &pairs {
            let w = if i == j { 0.5 } else { 1.0 };
            design.push(w * (dx[i] * dx[j] - df[i] * df[j]));
        }
        rhs.push(fraction * remainder - excess);
    }
    let theta = math::least_squares(&design, rows, cols, &rhs);
    let linear = theta[..n].to_vec();
    let mut quadratic = vec![0.0; n * n];
    for (k, &(i, j)) in pairs.iter().enumerate() {
        quadratic[i * n + j] = theta[n + k];
        quadratic[j * n + i] = theta[n + k];
    }
    QuadraticStorage::new(xs.clone(), linear, quadratic)
}

/// Checks the telescoping identity along the rollout of `controls` from `x0`:
/// returns `|sum L - (sum l + lambda(x_0) - lambda(x_N))|`.
pub fn telescoping_error<C: StageCost + Clone, S: StorageFunction + Clone>(
    cost: &C,
    storage: &S,
    model: &PlantModel,
    x0: &[f64],
    controls: &[f64],
    time_offset: usize,
) -> Result<f64> {
    let traj = rollout(model, x0, controls)?;
    let rotated = rotated_cost(cost.clone(), storage.clone(), model.clone());
    let steps = traj.len();
    let mut sum_l = math::CompensatedSum::zeros(1);
    let mut sum_rot = math::CompensatedSum::zeros(1);
    for k in 0..steps {
        sum_l.add(&[cost.value(time_offset + k, traj.state(k), traj.control(k))]);
        sum_rot.add(&[rotated.value(time_offset + k, traj.state(k), traj.control(k))]);
    }
    let expected =
        sum_l.value()[0] + storage.value(traj.state(0)) - storage.value(traj.state(steps));
    Ok((sum_rot.value()[0] - expected).abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem2Report {
    pub objective_original: f64,
    pub objective_rotated: f64,
    /// `objective_rotated - objective_original`.
    pub objective_gap: f64,
    /// `lambda(x_init) - lambda(x_term)`.
    pub expected_gap: f64,
    /// `max_i |u1_i - u2_i|`.
    pub control_distance: f64,
    pub status_original: SolveStatus,
    pub status_rotated: SolveStatus,
}

impl Problem2Report {
    pub fn gap_error(&self) -> f64 {
        (self.objective_gap - self.expected_gap).abs()
    }
}

/// Solves a fixed-endpoint problem with its own cost and with the rotated
/// cost (same constraints) from the shared warm start and compares them.
pub fn problem2_equivalence<S: StorageFunction + Clone + 'static>(
    problem: &NlpProblem,
    storage: S,
    solver: &Solver,
    warm_start: &[f64],
) -> Result<Problem2Report> {
    let x_init = match &problem.initial {
        InitialCondition::Fixed(x) => x.clone(),
        _ => {
            return Err(Error::InvalidConfig(
                "the equivalence needs a fixed initial state".into(),
            ))
        }
    };
    let x_term = match &problem.terminal {
        TerminalConstraint::Fixed(t) => t.clone(),
        _ => {
            return Err(Error::InvalidConfig(
                "the equivalence needs a fixed terminal state".into(),
            ))
        }
    };
    let mut rotated = problem.clone();
    rotated.cost = Arc::new(rotated_cost(
        problem.cost.clone(),
        storage.clone(),
        problem.model.clone(),
    ));
    let first = solver.solve(problem, warm_start)?;
    let second = solver.solve(&rotated, warm_start)?;
    for s in [&first, &second] {
        if s.status == SolveStatus::InfeasibleStart {
            return Err(Error::InfeasibleStart(s.diagnostic.clone()));
        }
    }
    Ok(Problem2Report {
        objective_original: first.objective,
        objective_rotated: second.objective,
        objective_gap: second.objective - first.objective,
        expected_gap: storage.value(&x_init) - storage.value(&x_term),
        control_distance: math::dist_inf(&first.controls, &second.controls),
        status_original: first.status,
        status_rotated: second.status,
    })
}

/// `sum_{k < steps} l(x(k), u(k))`, reading through the extension rule.
pub fn cumulative_cost(traj: &Trajectory, cost: &dyn StageCost, steps: usize) -> Result<f64> {
    let mut terms = Vec::with_capacity(steps);
    for k in 0..steps {
        let (x, u) = traj.extend_lookup(k)?;
        terms.push(cost.value(k, x, u));
    }
    Ok(math::kahan_sum(terms))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowAverage {
    pub from: usize,
    pub to: usize,
    pub average: f64,
    /// Max / min of the running average `(1/t) sum_{k<t} l` over
    /// `t` in the last half of `[0, to]`; estimates of limsup / liminf.
    pub limsup_estimate: f64,
    pub liminf_estimate: f64,
}

/// Mean stage cost over `[from, to)` plus running-average extremes.
pub fn window_average(
    traj: &Trajectory,
    cost: &dyn StageCost,
    from: usize,
    to: usize,
) -> Result<WindowAverage> {
    if from >= to {
        return Err(Error::InvalidConfig(format!("empty window [{from}, {to})")));
    }
    let mut running = math::CompensatedSum::zeros(1);
    let mut window = math::CompensatedSum::zeros(1);
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    let half = (to / 2).max(1);
    for k in 0..to {
        let (x, u) = traj.extend_lookup(k)?;
        let v = cost.value(k, x, u);
        running.add(&[v]);
        if k >= from {
            window.add(&[v]);
        }
        let t = k + 1;
        if t >= half {
            let avg = running.value()[0] / t as f64;
            hi = hi.max(avg);
            lo = lo.min(avg);
        }
    }
    Ok(WindowAverage {
        from,
        to,
        average: window.value()[0] / (to - from) as f64,
        limsup_estimate: hi,
        liminf_estimate: lo,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// `max_k |x_{j+1}(k) - x_j(k)|` over `[0, T_sim]`, one entry per pair.
    pub state_distance: Vec<f64>,
    /// `|J_{j+1} - J_j|` per pair (window average for average-cost tasks).
    pub cost_change: Vec<f64>,
    /// First `j` whose pair `(j, j + 1)` is below both thresholds.
    pub converged_at: Option<usize>,
}

/// Pairwise distances between consecutive iterations. `records[i]` must be
/// iteration `i`.
pub fn iteration_convergence(
    records: &[IterationRecord],
    model: &PlantModel,
    t_sim: usize,
    metric: Metric,
) -> Result<ConvergenceReport> {
    if records.len() < 2 {
        return Err(Error::InvalidConfig(
            "convergence needs at least two records".into(),
        ));
    }
    let mut state_distance = Vec::with_capacity(records.len() - 1);
    let mut cost_change = Vec::with_capacity(records.len() - 1);
    let value = |r: &IterationRecord| match metric {
        Metric::Cumulative => r.cumulative_cost,
        Metric::Average => r.window_average,
    };
    for pair in records.windows(2) {
        let (a, b) = (&pair[0].trajectory, &pair[1].trajectory);
        let mut d = 0.0_f64;
        for k in 0..=t_sim {
            d = d.max(model.state_distance(a.lookup_state(k)?, b.lookup_state(k)?));
        }
        state_distance.push(d);
        cost_change.push((value(&pair[1]) - value(&pair[0])).abs());
    }
    let converged_at = (0..state_distance.len())
        .find(|&j| {
            state_distance[j] <= CONVERGENCE_STATE_TOL && cost_change[j] <= CONVERGENCE_COST_TOL
        })
        .map(|j| records[j].j);
    Ok(ConvergenceReport {
        state_distance,
        cost_change,
        converged_at,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowCheck {
    pub k: usize,
    pub window_cost: f64,
    pub resolved_cost: f64,
    /// `window_cost - resolved_cost`.
    pub improvement: f64,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityReport {
    pub horizon: usize,
    pub windows: Vec<WindowCheck>,
    pub max_improvement: f64,
    pub verdict: bool,
}

/// Re-solves every window `[k, k + N]` of `traj` with both end states
/// pinned, warm-started from the trajectory's own controls.
pub fn check_receding_horizon_optimality(
    traj: &Trajectory,
    horizon: usize,
    cost: Arc<dyn StageCost>,
    model: &PlantModel,
    ks: Range<usize>,
    solver: &Solver,
) -> Result<OptimalityReport> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    let mut windows = Vec::with_capacity(ks.len());
    for k in ks {
        let target = traj.lookup_state(k + horizon)?.to_vec();
        let warm = traj.control_window(k, horizon)?;
        let problem = NlpProblem::new(
            model.clone(),
            cost.clone(),
            horizon,
            traj.lookup_state(k)?.to_vec(),
        )
        .with_terminal(target)
        .with_time_offset(k);
        let solution = solver.solve(&problem, &warm)?;
        if solution.status == SolveStatus::InfeasibleStart {
            return Err(Error::InfeasibleStart(format!(
                "window at {k}: {}",
                solution.diagnostic
            )));
        }
        windows.push(WindowCheck {
            k,
            window_cost: solution.warm_objective,
            resolved_cost: solution.objective,
            improvement: solution.warm_objective - solution.objective,
            status: solution.status,
        });
    }
    let max_improvement = windows
        .iter()
        .map(|w| w.improvement)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(OptimalityReport {
        horizon,
        verdict: windows.iter().all(|w| w.improvement <= OPTIMALITY_TOL),
        windows,
        max_improvement,
    })
}

/// Nudges control `start + nudge_at` by `delta` and re-pins the window
/// `[start, start + horizon]`: the other controls of the window are moved
/// by a minimum-norm Gauss-Newton correction so the window still ends on
/// the original state. Everything outside the window is unchanged.
pub fn perturb_window(
    traj: &Trajectory,
    model: &PlantModel,
    start: usize,
    horizon: usize,
    nudge_at: usize,
    delta: &[f64],
) -> Result<Trajectory> {
    let (n, m) = (model.n(), model.m());
    check_dim(m, delta.len())?;
    if nudge_at >= horizon || start + horizon > traj.len() {
        return Err(Error::InvalidConfig(format!(
            "window [{start}, {}] with nudge {nudge_at} does not fit the stored trajectory",
            start + horizon
        )));
    }
    let x_start = traj.state(start).to_vec();
    let target = traj.state(start + horizon).to_vec();
    let mut window = traj.control_window(start, horizon)?;
    for (v, d) in window[nudge_at * m..(nudge_at + 1) * m]
        .iter_mut()
        .zip(delta)
    {
        *v += d;
    }
    let movable: Vec<usize> = (0..horizon * m).filter(|i| i / m != nudge_at).collect();
    let k = movable.len();
    let end_of = |w: &[f64]| -> Result<Vec<f64>> {
        let t = rollout(model, &x_start, w)?;
        let mut r = vec![0.0; n];
        model.state_diff(t.state(horizon), &target, &mut r);
        Ok(r)
    };
    let mut residual = end_of(&window)?;
    for _ in 0..50 {
        if math::norm_inf(&residual) <= 1e-12 {
            break;
        }
        // Jacobian of the end state in the movable controls (n x k).
        let mut jac = vec![0.0; n * k];
        for (col, &i) in movable.iter().enumerate() {
            let h = 1e-6 * window[i].abs().max(1.0);
            let saved = window[i];
            window[i] = saved + h;
            let plus = end_of(&window)?;
            window[i] = saved - h;
            let minus = end_of(&window)?;
            window[i] = saved;
            for r in 0..n {
                jac[r * k + col] = (plus[r] - minus[r]) / (2.0 * h);
            }
        }
        // step = -J' (J J')^{-1} r
        let mut jjt = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                jjt[a * n + b] = (0..k).map(|c| jac[a * k + c] * jac[b * k + c]).sum();
            }
        }
        let mut y = residual.clone();
        math::solve_regularized(&jjt, n, &mut y);
        for (col, &i) in movable.iter().enumerate() {
            window[i] -= (0..n).map(|r| jac[r * k + col] * y[r]).sum::<f64>();
        }
        residual = end_of(&window)?;
    }
    if math::norm_inf(&residual) > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "could not re-pin the perturbed window (end miss {:e})",
            math::norm_inf(&residual)
        )));
    }
    let segment = rollout(model, &x_start, &window)?;
    let mut states = traj.states_flat().to_vec();
    let mut controls = traj.controls_flat().to_vec();
    for i in 0..horizon {
        controls[(start + i) * m..(start + i + 1) * m].copy_from_slice(segment.control(i));
        states[(start + i + 1) * n..(start + i + 2) * n].copy_from_slice(segment.state(i + 1));
    }
    // The window end is re-pinned to the original state exactly.
    states[(start + horizon) * n..(start + horizon + 1) * n].copy_from_slice(&target);
    Trajectory::new(n, m, states, controls, traj.extension().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::QuadraticCost;
    use crate::plants;

    #[test]
    fn zero_storage_leaves_cost_unchanged() {
        let model = plants::linear_regulator().unwrap();
        let cost = QuadraticCost::regulator(2, 1);
        let rot = rotated_cost(cost.clone(), ZeroStorage, model);
        for (x, u) in [
            ([1.0, -2.0], [0.3]),
            ([0.0, 0.0], [0.0]),
            ([-4.0, 3.5], [-1.0]),
        ] {
            assert_eq!(rot.value(0, &x, &u), cost.value(0, &x, &u));
        }
    }

    #[test]
    fn rotated_gradient_matches_differences() {
        let model = plants::reactor().unwrap();
        let ss = model.steady_state().unwrap().clone();
        let storage = QuadraticStorage::new(
            ss.state.clone(),
            vec![0.3, -0.2, 0.5, 0.1],
            (0..16).map(|i| 0.01 * (i as f64 % 5.0)).collect(),
        )
        .unwrap();
        let cost = QuadraticCost::linear(vec![0.0, 0.0, -1.0, 0.0], vec![0.0, 0.0]);
        let rot = rotated_cost(cost, storage, model);
        let x = [1.2, 0.8, 1.6, 0.4];
        let u = [0.9, 1.1];
        let mut gx = [0.0; 4];
        let mut gu = [0.0; 2];
        rot.gradient(0, &x, &u, &mut gx, &mut gu);
        for i in 0..6 {
            let h = 1e-6;
            let (mut xp, mut up, mut xm, mut um) = (x, u, x, u);
            if i < 4 {
                xp[i] += h;
                xm[i] -= h;
            } else {
                up[i - 4] += h;
                um[i - 4] -= h;
            }
            let fd = (rot.value(0, &xp, &up) - rot.value(0, &xm, &um)) / (2.0 * h);
            let an = if i < 4 { gx[i] } else { gu[i - 4] };
            assert!(
                (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
                "{i}: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn steady_state_rotated_value_is_zero_when_normalised() {
        let model = plants::reactor().unwrap();
        let ss = model.steady_state().unwrap().clone();
        let cost = QuadraticCost::linear(vec![0.0, 0.0, -1.0, 0.0], vec![0.0, 0.0])
            .normalized(&ss.state, &ss.control);
        let storage = QuadraticStorage::linear(vec![0.4, -1.0, 2.0, 0.3]);
        let rot = rotated_cost(cost, storage, model);
        assert!(rot.value(0, &ss.state, &ss.control).abs() <= 1e-10);
    }

    #[test]
    fn grid_enumerates_corners() {
        let g = SampleGrid::new(1, vec![0.0, -1.0], vec![1.0, 1.0], vec![2, 3]).unwrap();
        assert_eq!(g.len(), 6);
        let mut x = [0.0];
        let mut u = [0.0];
        g.point(5, &mut x, &mut u);
        assert_eq!((x[0], u[0]), (1.0, 1.0));
        g.point(0, &mut x, &mut u);
        assert_eq!((x[0], u[0]), (0.0, -1.0));
        assert_eq!(g.cell(), vec![1.0, 1.0]);
    }

    #[test]
    fn window_average_of_constant_cost() {
        struct Const;
        impl StageCost for Const {
            fn value(&self, _t: usize, _x: &[f64], _u: &[f64]) -> f64 {
                2.5
            }
            fn gradient(&self, _t: usize, _x: &[f64], _u: &[f64], gx: &mut [f64], gu: &mut [f64]) {
                gx.iter_mut().chain(gu.iter_mut()).for_each(|v| *v = 0.0);
            }
        }
        let model = plants::linear_regulator().unwrap();
        let traj = rollout(&model, &[1.0, 0.0], &[0.1; 20]).unwrap();
        let w = window_average(&traj, &Const, 10, 20).unwrap();
        assert!((w.average - 2.5).abs() < 1e-15);
        assert!((w.limsup_estimate - 2.5).abs() < 1e-15 && (w.liminf_estimate - 2.5).abs() < 1e-15);
        assert_eq!(
            cumulative_cost(&traj, &crate::cost::ZeroCost, 20).unwrap(),
            0.0
        );
    }
}
