//! Embedded solver for finite-horizon optimal-control problems.
//!
//! Decision variables are the control sequence (plus the initial state when
//! it is free); states are eliminated by single shooting. Terminal equalities,
//! state boxes and the summed-output box are handled by an
//! augmented-Lagrangian outer loop, control boxes by exact projection in the
//! inner loop.
//!
//! Starting from a feasible warm start the solver never returns a point worse
//! than that warm start: the learning controller's monotonicity guarantees
//! lean on this.

mod projected_newton;
mod shooting;

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::average::OutputMap;
use crate::cost::StageCost;
use crate::dynamics::{BoxSet, PlantModel};
use crate::error::{check_dim, Error, Result};
use projected_newton::ProjectedNewton;
use shooting::{Multipliers, Shooting};

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Fixed(Vec<f64>),
    /// Initial state is a decision variable constrained to the state box.
    Free {
        guess: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TerminalConstraint {
    Free,
    /// `x(N) = target`.
    Fixed(Vec<f64>),
    /// `x(N) = x(0)`.
    Periodic,
}

/// `sum_{i<N} h(x_i, u_i) - offset` must lie in `base`.
#[derive(Clone)]
pub struct SummedOutputConstraint {
    pub map: Arc<dyn OutputMap>,
    pub base: BoxSet,
    pub offset: Vec<f64>,
}

impl core::fmt::Debug for SummedOutputConstraint {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("SummedOutputConstraint")
            .field("base", &self.base)
            .field("offset", &self.offset)
            .finish()
    }
}

/// A finite-horizon problem over `u(0..N-1)` under single shooting.
#[derive(Clone)]
pub struct NlpProblem {
    pub horizon: usize,
    pub initial: InitialCondition,
    /// Absolute time of prediction step 0, passed to the stage cost.
    pub time_offset: usize,
    pub model: PlantModel,
    pub cost: Arc<dyn StageCost>,
    pub terminal: TerminalConstraint,
    pub summed_output: Option<SummedOutputConstraint>,
}

impl core::fmt::Debug for NlpProblem {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("NlpProblem")
            .field("horizon", &self.horizon)
            .field("initial", &self.initial)
            .field("time_offset", &self.time_offset)
            .field("model", &self.model.name())
            .field("terminal", &self.terminal)
            .field("summed_output", &self.summed_output)
            .finish()
    }
}

impl NlpProblem {
    pub fn new(
        model: PlantModel,
        cost: Arc<dyn StageCost>,
        horizon: usize,
        x_init: Vec<f64>,
    ) -> Self {
        Self {
            horizon,
            initial: InitialCondition::Fixed(x_init),
            time_offset: 0,
            model,
            cost,
            terminal: TerminalConstraint::Free,
            summed_output: None,
        }
    }

    pub fn with_terminal(mut self, target: Vec<f64>) -> Self {
        self.terminal = TerminalConstraint::Fixed(target);
        self
    }

    pub fn with_time_offset(mut self, t0: usize) -> Self {
        self.time_offset = t0;
        self
    }

    pub fn x_init(&self) -> &[f64] {
        match &self.initial {
            InitialCondition::Fixed(x) => x,
            InitialCondition::Free { guess } => guess,
        }
    }

    pub fn num_controls(&self) -> usize {
        self.horizon * self.model.m()
    }

    pub fn validate(&self, eps_feas: f64) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        let n = self.model.n();
        check_dim(n, self.x_init().len())?;
        if let InitialCondition::Fixed(x) = &self.initial {
            if !self.model.state_box().contains(x, eps_feas) {
                return Err(Error::InvalidConfig(format!(
                    "initial state lies outside the state box by {:e}",
                    self.model.state_box().max_violation(x)
                )));
            }
        }
        if let TerminalConstraint::Fixed(target) = &self.terminal {
            check_dim(n, target.len())?;
            if !self.model.state_box().contains(target, eps_feas) {
                return Err(Error::InvalidConfig(
                    "terminal target lies outside the state box".into(),
                ));
            }
        }
        if let Some(sum) = &self.summed_output {
            check_dim(sum.map.output_dim(), sum.base.dim())?;
            check_dim(sum.map.output_dim(), sum.offset.len())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    /// Iteration budget exhausted; the best feasible iterate is returned.
    MaxIter,
    /// The warm start violated the constraints; nothing was solved.
    InfeasibleStart,
}

/// One line of the optional per-solve trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub outer: usize,
    pub penalty: f64,
    pub residual: f64,
    pub objective: f64,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpSolution {
    /// `u*(0..N-1)`, flattened.
    pub controls: Vec<f64>,
    /// `x*(0..N)`, flattened.
    pub states: Vec<f64>,
    pub objective: f64,
    pub warm_objective: f64,
    /// The warm start met every constraint within the solver tolerances;
    /// only then is `objective <= warm_objective` guaranteed.
    pub warm_feasible: bool,
    pub stationarity: f64,
    pub terminal_residual: f64,
    pub box_violation: f64,
    pub summed_residual: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub status: SolveStatus,
    pub trace: Vec<TraceEntry>,
    pub diagnostic: String,
}

impl NlpSolution {
    pub fn is_converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn control(&self, i: usize, m: usize) -> &[f64] {
        &self.controls[i * m..(i + 1) * m]
    }

    pub fn state(&self, i: usize, n: usize) -> &[f64] {
        &self.states[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub eps_kkt: f64,
    pub eps_eq: f64,
    pub eps_feas: f64,
    /// Outer loop stops once the equality residual is below
    /// `eq_polish * eps_eq` (or stalls below `eps_eq`).
    pub eq_polish: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Inner iterations summed over one solve; once spent, the best
    /// feasible point so far is returned.
    pub max_inner_total: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    /// Required per-outer-iteration shrink of the residual before the
    /// penalty is raised.
    pub residual_shrink: f64,
    pub multiplier_init: MultiplierInit,
    pub trace: bool,
}

/// Starting multipliers of the augmented Lagrangian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiplierInit {
    Zero,
    /// Least-squares first-order estimate at the warm start; keeps a
    /// near-optimal warm start near its own neighbourhood.
    LeastSquares,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            eps_kkt: 1e-8,
            eps_eq: 1e-7,
            eps_feas: 1e-6,
            eq_polish: 1e-3,
            max_outer: 200,
            max_inner: 500,
            max_inner_total: 5000,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e10,
            residual_shrink: 0.25,
            multiplier_init: MultiplierInit::LeastSquares,
            trace: false,
        }
    }
}

/// Outer iterations in a row whose inner solve failed without improving the
/// best feasible point by more than `eps_kkt` (relative) before the solver
/// gives up.
const FUTILE_OUTER: usize = 3;

/// Solver instance; owns nothing but its settings, so one per thread is cheap.
#[derive(Debug, Clone, Default)]
pub struct Solver {
    pub settings: SolverSettings,
}

struct Candidate {
    z: Vec<f64>,
    objective: f64,
    residuals: shooting::Residuals,
}

impl Solver {
    pub fn new(settings: SolverSettings) -> Self {
        Self { settings }
    }

    fn is_feasible(&self, r: &shooting::Residuals) -> bool {
        r.terminal <= self.settings.eps_eq
            && r.state_box <= self.settings.eps_feas
            && r.summed <= self.settings.eps_feas
    }

    fn finish(
        &self,
        shooting: &mut Shooting<'_>,
        cand: &Candidate,
        warm_objective: f64,
        warm_feasible: bool,
        stationarity: f64,
        outer: usize,
        inner: usize,
        status: SolveStatus,
        trace: Vec<TraceEntry>,
        diagnostic: String,
    ) -> NlpSolution {
        shooting.point(&cand.z);
        let (x0, controls) = shooting.split(&cand.z);
        let _ = x0;
        let controls = controls.to_vec();
        let m = shooting.problem.model.m();
        let box_violation = cand.residuals.state_box.max(
            controls
                .chunks(m)
                .map(|u| shooting.problem.model.control_box().max_violation(u))
                .fold(0.0, f64::max),
        );
        NlpSolution {
            controls,
            states: shooting.predicted_states().to_vec(),
            objective: cand.objective,
            warm_objective,
            warm_feasible,
            stationarity,
            terminal_residual: cand.residuals.terminal,
            box_violation,
            summed_residual: cand.residuals.summed,
            outer_iterations: outer,
            inner_iterations: inner,
            status,
            trace,
            diagnostic,
        }
    }

    /// Solves `problem` from `warm_start` (flattened controls, length `N m`).
    ///
    /// The warm start's rollout must satisfy every constraint within
    /// `eps_feas`; otherwise the returned status is
    /// [`SolveStatus::InfeasibleStart`] and the warm start is echoed back.
    pub fn solve(&self, problem: &NlpProblem, warm_start: &[f64]) -> Result<NlpSolution> {
        let s = &self.settings;
        problem.validate(s.eps_feas)?;
        check_dim(problem.num_controls(), warm_start.len())?;
        let mut shooting = Shooting::new(problem);
        let mut z = shooting.pack(warm_start);
        let (lo, hi) = shooting.bounds();

        let control_violation = z
            .iter()
            .zip(lo.iter().zip(&hi))
            .map(|(v, (l, h))| (l - v).max(v - h).max(0.0))
            .fold(0.0, f64::max);
        for ((v, l), h) in z.iter_mut().zip(&lo).zip(&hi) {
            *v = v.clamp(*l, *h);
        }
        let (warm_objective, c) = shooting.point(&z);
        let warm_res = shooting.residuals(&c);
        let warm = Candidate {
            z: z.clone(),
            objective: warm_objective,
            residuals: warm_res,
        };
        if control_violation > s.eps_feas
            || warm_res.max() > s.eps_feas
            || !warm_objective.is_finite()
        {
            let diagnostic = format!(
                "control box {:e}, state box {:e}, terminal {:e}, summed output {:e}",
                control_violation, warm_res.state_box, warm_res.terminal, warm_res.summed
            );
            return Ok(self.finish(
                &mut shooting,
                &warm,
                warm_objective,
                false,
                f64::NAN,
                0,
                0,
                SolveStatus::InfeasibleStart,
                Vec::new(),
                diagnostic,
            ));
        }

        let mut mult = match s.multiplier_init {
            MultiplierInit::Zero => Multipliers::zeros(problem, s.initial_penalty),
            MultiplierInit::LeastSquares => {
                shooting.estimate_multipliers(&z, &c, s.initial_penalty)
            }
        };
        let inner = ProjectedNewton {
            max_iterations: s.max_inner,
        };
        let mut best: Option<Candidate> = if self.is_feasible(&warm_res) {
            Some(Candidate {
                z: warm.z.clone(),
                objective: warm.objective,
                residuals: warm_res,
            })
        } else {
            None
        };
        let mut prev_residual = warm_res.max();
        let mut trace = Vec::new();
        let mut inner_total = 0;
        let mut stall = 0;
        let mut futile = 0;
        let mut outer_used = 0;
        let mut last = None;

        for outer in 1..=s.max_outer {
            // Inexact inner solves while the equality residual is large.
            let inner_tol = if prev_residual <= s.eps_eq {
                s.eps_kkt
            } else {
                (1e-2 * prev_residual).clamp(s.eps_kkt, 1e-3)
            };
            let out = inner.minimize(&mut shooting, &mut z, &mult, inner_tol);
            let tight = out.stationarity <= s.eps_kkt * out.objective.abs().max(1.0);
            inner_total += out.iterations;
            let (objective, c) = shooting.point(&z);
            let res = shooting.residuals(&c);
            let residual = res.max();
            if s.trace {
                trace.push(TraceEntry {
                    outer,
                    penalty: mult.rho,
                    residual,
                    objective,
                    inner_iterations: out.iterations,
                });
            }
            let here = Candidate {
                z: z.clone(),
                objective,
                residuals: res,
            };
            let improves = self.is_feasible(&res)
                && best.as_ref().map_or(true, |b| {
                    objective < b.objective - s.eps_kkt * b.objective.abs().max(1.0)
                });
            let stuck = mult.rho >= s.max_penalty && residual > s.residual_shrink * prev_residual;
            if (!out.converged || stuck) && !improves {
                futile += 1;
            } else {
                futile = 0;
            }
            if self.is_feasible(&res) && best.as_ref().map_or(true, |b| objective < b.objective) {
                best = Some(Candidate {
                    z: z.clone(),
                    objective,
                    residuals: res,
                });
            }

            let polished = residual <= s.eq_polish * s.eps_eq;
            if residual <= s.eps_eq && residual > 0.5 * prev_residual.min(f64::MAX) {
                stall += 1;
            } else {
                stall = 0;
            }
            let stalled = residual <= s.eps_eq && (stall >= 3 || mult.rho >= s.max_penalty);
            if tight && (polished || stalled) {
                // Converged point; fall back to the warm start only if the
                // optimiser ended above it (rounding-level differences).
                let chosen =
                    if here.objective <= warm_objective + 1e-12 || !self.is_feasible(&warm_res) {
                        here
                    } else {
                        warm
                    };
                return Ok(self.finish(
                    &mut shooting,
                    &chosen,
                    warm_objective,
                    self.is_feasible(&warm_res),
                    out.stationarity,
                    outer,
                    inner_total,
                    SolveStatus::Converged,
                    trace,
                    String::new(),
                ));
            }

            outer_used = outer;
            if futile >= FUTILE_OUTER || inner_total >= s.max_inner_total {
                last = Some((here, out.stationarity));
                break;
            }
            shooting.update_multipliers(&c, &mut mult);
            // Inside the tolerance the multipliers do the rest; a larger
            // penalty would only spoil the difference Hessian.
            if residual > s.residual_shrink * prev_residual && residual > s.eps_eq {
                mult.rho = (mult.rho * s.penalty_growth).min(s.max_penalty);
            }
            prev_residual = residual;
            last = Some((here, out.stationarity));
        }

        let (fallback, stationarity) = last.expect("at least one outer iteration");
        let chosen = best.unwrap_or(fallback);
        Ok(self.finish(
            &mut shooting,
            &chosen,
            warm_objective,
            self.is_feasible(&warm_res),
            stationarity,
            outer_used,
            inner_total,
            SolveStatus::MaxIter,
            trace,
            if futile >= FUTILE_OUTER {
                format!(
                    "no progress in {} consecutive outer iterations",
                    FUTILE_OUTER
                )
            } else if inner_total >= s.max_inner_total {
                format!("inner iteration budget of {} exhausted", s.max_inner_total)
            } else {
                format!("outer iteration budget of {} exhausted", s.max_outer)
            },
        ))
    }
}

/// Convenience wrapper around a default [`Solver`].
pub fn solve(problem: &NlpProblem, warm_start: &[f64]) -> Result<NlpSolution> {
    Solver::default().solve(problem, warm_start)
}

/// `sum_{i<N} l(t0 + i, x(i), u(i))` along the rollout of `controls`.
pub fn evaluate_objective(problem: &NlpProblem, controls: &[f64]) -> Result<f64> {
    check_dim(problem.num_controls(), controls.len())?;
    let mut shooting = Shooting::new(problem);
    let z = shooting.pack(controls);
    Ok(shooting.point(&z).0)
}

/// Gradient of [`evaluate_objective`] with respect to every control entry,
/// by reverse accumulation through the dynamics.
pub fn gradient(problem: &NlpProblem, controls: &[f64]) -> Result<Vec<f64>> {
    check_dim(problem.num_controls(), controls.len())?;
    let mut shooting = Shooting::new(problem);
    let z = shooting.pack(controls);
    let mut g = vec![0.0; z.len()];
    shooting.merit_gradient(&z, None, &mut g);
    let skip = z.len() - controls.len();
    Ok(g[skip..].to_vec())
}

/// Predicted states `x(0..N)` of `controls` from the problem's initial state.
pub fn predict(problem: &NlpProblem, controls: &[f64]) -> Result<Vec<f64>> {
    check_dim(problem.num_controls(), controls.len())?;
    let mut shooting = Shooting::new(problem);
    let z = shooting.pack(controls);
    shooting.point(&z);
    Ok(shooting.predicted_states().to_vec())
}

/// Terminal residual `|x(N) - target|_inf` of `controls` (zero when free).
pub fn terminal_residual(problem: &NlpProblem, controls: &[f64]) -> Result<f64> {
    let states = predict(problem, controls)?;
    let n = problem.model.n();
    let last = &states[problem.horizon * n..];
    Ok(match &problem.terminal {
        TerminalConstraint::Free => 0.0,
        TerminalConstraint::Fixed(t) => problem.model.state_distance(last, t),
        TerminalConstraint::Periodic => problem.model.state_distance(last, &states[..n]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{QuadraticCost, ZeroCost};
    use crate::dynamics::rollout;
    use crate::math;
    use crate::plants;

    fn lr_problem(horizon: usize, x0: Vec<f64>) -> NlpProblem {
        NlpProblem::new(
            plants::linear_regulator().unwrap(),
            Arc::new(QuadraticCost::regulator(2, 1)),
            horizon,
            x0,
        )
    }

    #[test]
    fn single_step_terminal_pins_the_control() {
        let model = plants::linear_regulator().unwrap();
        let x0 = vec![0.5, -0.2];
        let u0 = 0.37;
        let target = model.step(&x0, &[u0]).unwrap();
        let problem = lr_problem(1, x0).with_terminal(target);
        let sol = solve(&problem, &[u0]).unwrap();
        assert!(sol.is_converged());
        assert!((sol.controls[0] - u0).abs() < 1e-9);
    }

    #[test]
    fn control_energy_minimum_is_zero() {
        let cost = QuadraticCost::linear(vec![0.0; 2], vec![0.0]).with_quadratic(
            vec![0.0; 2],
            vec![2.0],
            vec![0.0; 2],
            vec![0.0],
        );
        let problem = NlpProblem::new(
            plants::linear_regulator().unwrap(),
            Arc::new(cost.unwrap()),
            5,
            vec![0.0, 0.0],
        );
        let sol = solve(&problem, &[0.3, -0.2, 0.1, 0.5, -0.9]).unwrap();
        assert!(sol.is_converged());
        assert!(math::norm_inf(&sol.controls) < 1e-9, "{:?}", sol.controls);
    }

    #[test]
    fn infeasible_warm_start_is_reported() {
        let problem = lr_problem(2, vec![0.0, 0.0]).with_terminal(vec![0.0, 0.0]);
        let sol = solve(&problem, &[0.5, 0.5]).unwrap();
        assert_eq!(sol.status, SolveStatus::InfeasibleStart);
        assert_eq!(sol.controls, vec![0.5, 0.5]);
    }

    #[test]
    fn zero_cost_objective_is_zero() {
        let problem = NlpProblem::new(
            plants::linear_regulator().unwrap(),
            Arc::new(ZeroCost),
            3,
            vec![1.0, 0.0],
        );
        assert_eq!(evaluate_objective(&problem, &[0.1, 0.2, 0.3]).unwrap(), 0.0);
        assert!(gradient(&problem, &[0.1, 0.2, 0.3])
            .unwrap()
            .iter()
            .all(|g| *g == 0.0));
    }

    #[test]
    fn quadratic_single_step_objective() {
        let problem = lr_problem(1, vec![1.0, 0.0]);
        assert_eq!(evaluate_objective(&problem, &[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn rejects_zero_horizon_and_bad_warm_start_length() {
        let problem = lr_problem(0, vec![0.0, 0.0]);
        assert!(solve(&problem, &[]).is_err());
        let problem = lr_problem(2, vec![0.0, 0.0]);
        assert!(matches!(
            solve(&problem, &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn solve_is_deterministic() {
        let model = plants::linear_regulator().unwrap();
        let warm = vec![1.0, 1.0, -0.5, -0.8];
        let target = rollout(&model, &[-3.95, -0.05], &warm)
            .unwrap()
            .state(4)
            .to_vec();
        let problem = lr_problem(4, vec![-3.95, -0.05]).with_terminal(target);
        let a = solve(&problem, &warm).unwrap();
        let b = solve(&problem, &warm).unwrap();
        assert_eq!(a, b);
        assert!(a.is_converged());
        assert!(a.objective <= a.warm_objective + 1e-12);
        assert!(a.terminal_residual <= 1e-7);
    }
}
