//! The benchmark scenarios: plants, costs, horizons, initial-trajectory
//! recipes and oracle problems.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::average::{AverageConstraintSpec, ControlComponent};
use crate::controller::{ControllerConfig, ExtensionRule, Task};
use crate::cost::{QuadraticCost, ReferenceSignal, StageCost, TrackingCost};
use crate::dynamics::{
    check_feasible, rollout, BoxSet, Extension, PlantModel, Trajectory, FEAS_TOL,
};
use crate::error::{Error, Result};
use crate::math;
use crate::plants;
use crate::solver::{
    InitialCondition, NlpProblem, NlpSolution, SolveStatus, Solver, TerminalConstraint,
};

pub const SCENARIO_NAMES: [&str; 6] = [
    "linear-regulator",
    "nonlinear-regulator",
    "linear-tracker",
    "unicycle",
    "reactor-economic",
    "reactor-convexified",
];

/// How iterations are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Finite cumulative cost `J_j` (stage cost vanishes at the steady state).
    Cumulative,
    /// Window average of the stage cost.
    Average,
}

/// How the initial feasible trajectory is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Recipe {
    /// Open-loop steer into `|x|_inf <= radius` from a relaxed solve, then
    /// clamped linear feedback `u = -K x`.
    SteerThenFeedback { radius: f64, gain: Vec<f64> },
    /// One loop through `x0` tracking `loop_reference`, closed by `x(P) = x(0)`.
    PeriodicLoop { loop_reference: ReferenceSignal },
    /// Linear ramp of the control from zero to `u_s`, then `u_s`.
    RampToSteadyState { ramp_steps: usize },
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub task: Task,
    pub horizon: usize,
    pub t_sim: usize,
    pub iterations: usize,
    pub metric: Metric,
    pub reference: Option<TrackingCost>,
    pub average: Option<AverageConstraintSpec>,
    pub recipe: Recipe,
    /// Parameters restated for reports.
    pub parameters: Vec<(String, String)>,
}

impl Scenario {
    pub fn model(&self) -> &PlantModel {
        &self.task.model
    }

    pub fn cost(&self) -> &Arc<dyn StageCost> {
        &self.task.cost
    }

    pub fn controller_config(&self) -> ControllerConfig {
        let mut cfg = ControllerConfig::new(self.horizon, self.t_sim, self.iterations);
        cfg.average = self.average.clone();
        cfg
    }

    pub fn period(&self) -> Option<usize> {
        match self.task.extension {
            ExtensionRule::Periodic(p) => Some(p),
            _ => None,
        }
    }

    /// Replaces the horizon; the average constraint's default base set scales with it.
    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        if let Some(spec) = &self.average {
            let scaled = crate::average::default_base(&spec.target, horizon);
            let base = if self.name.starts_with("reactor") {
                one_sided_base(&scaled)
            } else {
                scaled
            };
            self.average = Some(AverageConstraintSpec::new(
                spec.map.clone(),
                spec.target.clone(),
                base,
            )?);
        }
        self.horizon = horizon;
        self.set_param("N", horizon.to_string());
        Ok(self)
    }

    pub fn set_param(&mut self, key: &str, value: String) {
        match self.parameters.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.parameters.push((key.into(), value)),
        }
    }
}

fn param(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

/// LQR gain for `x+ = A x + B u` with weights `Q = I`, `R = r I`, by
/// iterating the Riccati recursion to a fixed point (`m = 1` only).
pub fn lqr_gain(a: &[f64], b: &[f64], n: usize, r: f64) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        p[i * n + i] = 1.0;
    }
    let mut k = vec![0.0; n];
    for _ in 0..10_000 {
        // k = (r + b' P b)^-1 b' P a
        let pb: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| p[i * n + j] * b[j]).sum())
            .collect();
        let s = r + math::dot(b, &pb);
        let pa: Vec<f64> = (0..n * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                (0..n).map(|l| p[i * n + l] * a[l * n + j]).sum()
            })
            .collect();
        let bpa: Vec<f64> = (0..n)
            .map(|j| (0..n).map(|i| b[i] * pa[i * n + j]).sum())
            .collect();
        k = bpa.iter().map(|v| v / s).collect();
        // P = Q + A' P A - A' P b k
        let mut next = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let apa: f64 = (0..n).map(|l| a[l * n + i] * pa[l * n + j]).sum();
                let apb: f64 = (0..n).map(|l| a[l * n + i] * pb[l]).sum();
                next[i * n + j] = if i == j { 1.0 } else { 0.0 } + apa - apb * k[j];
            }
        }
        let change = math::dist_inf(&next, &p);
        p = next;
        if change < 1e-14 {
            break;
        }
    }
    k
}

fn regulator(name: &'static str, model: PlantModel) -> Scenario {
    let gain = lqr_gain(&plants::DOUBLE_INTEGRATOR_A, &[0.0, 1.0], 2, 1.0);
    Scenario {
        name,
        task: Task {
            model,
            cost: Arc::new(QuadraticCost::regulator(2, 1)),
            x0: vec![-3.95, -0.05],
            extension: ExtensionRule::Hold,
        },
        horizon: 4,
        t_sim: 60,
        iterations: 15,
        metric: Metric::Cumulative,
        reference: None,
        average: None,
        recipe: Recipe::SteerThenFeedback { radius: 0.5, gain },
        parameters: vec![
            param("x0", "(-3.95, -0.05)"),
            param("state box", "[-4, 4]^2"),
            param("control box", "[-1, 1]"),
            param("stage cost", "|x|^2 + |u|^2"),
            param("N", 4),
            param("T_sim", 60),
            param("iterations", 15),
        ],
    }
}

/// Corners `(c - w/2, c - w/2)`, ... traversed counter-clockwise, one
/// quarter side per step, starting at the lower-left corner.
pub fn square_reference(center: [f64; 2], width: f64) -> Result<ReferenceSignal> {
    ReferenceSignal::from_fn(2, 16, |k| {
        let side = k / 4;
        let t = (k % 4) as f64 * width / 4.0;
        let (x0, y0) = (center[0] - width / 2.0, center[1] - width / 2.0);
        match side {
            0 => vec![x0 + t, y0],
            1 => vec![x0 + width, y0 + t],
            2 => vec![x0 + width - t, y0 + width],
            _ => vec![x0, y0 + width - t],
        }
    })
}

/// Counter-clockwise circle sampled at `period` points from angle `phase`.
pub fn circle_reference(
    center: [f64; 2],
    radius: f64,
    period: usize,
    phase: f64,
) -> Result<ReferenceSignal> {
    ReferenceSignal::from_fn(2, period, |k| {
        let a = phase + 2.0 * math::PI * k as f64 / period as f64;
        vec![
            center[0] + radius * math::cos(a),
            center[1] + radius * math::sin(a),
        ]
    })
}

fn linear_tracker() -> Result<Scenario> {
    let reference = TrackingCost::new(square_reference([4.0, 4.0], 4.0)?, vec![0, 1])?;
    Ok(Scenario {
        name: "linear-tracker",
        task: Task {
            model: plants::linear_tracker()?,
            cost: Arc::new(reference.clone()),
            x0: vec![0.0, 0.0],
            extension: ExtensionRule::Periodic(16),
        },
        horizon: 4,
        t_sim: 8 * 16,
        iterations: 15,
        metric: Metric::Average,
        reference: Some(reference),
        average: None,
        recipe: Recipe::PeriodicLoop {
            loop_reference: square_reference([1.0, 1.0], 2.0)?,
        },
        parameters: vec![
            param("x0", "(0, 0)"),
            param("state box", "[-4, 5]^2"),
            param("control box", "[-1, 1]^2"),
            param("reference", "square, width 4, center (4, 4), period 16"),
            param("stage cost", "|x - r(k)|^2"),
            param("N", 4),
            param("T_sim", 128),
            param("iterations", 15),
        ],
    })
}

pub const UNICYCLE_PERIOD: usize = 40;

fn unicycle() -> Result<Scenario> {
    let phase = -0.75 * math::PI;
    let reference = TrackingCost::new(
        circle_reference([6.0, 6.0], 5.0, UNICYCLE_PERIOD, phase)?,
        vec![0, 1],
    )?;
    Ok(Scenario {
        name: "unicycle",
        task: Task {
            model: plants::unicycle()?,
            cost: Arc::new(reference.clone()),
            x0: vec![0.0; 4],
            extension: ExtensionRule::Periodic(UNICYCLE_PERIOD),
        },
        horizon: 10,
        t_sim: 8 * UNICYCLE_PERIOD,
        iterations: 15,
        metric: Metric::Average,
        reference: Some(reference),
        average: None,
        recipe: Recipe::PeriodicLoop {
            loop_reference: circle_reference([0.0, 1.0], 1.0, UNICYCLE_PERIOD, -0.5 * math::PI)?,
        },
        parameters: vec![
            param("x0", "(0, 0, 0, 0)"),
            param("sampling time", "0.1 s (RK4)"),
            param("acceleration", "[-15, 15] m/s^2"),
            param("turn rate", "[-12, 12] rad/s"),
            param("reference", "circle, radius 5, center (6, 6), period 4 s"),
            param("stage cost", "|(x, y) - r(k)|^2"),
            param("N", 10),
            param("T_sim", 8 * UNICYCLE_PERIOD),
            param("iterations", 15),
        ],
    })
}

/// `[lo, 0]`: keeps each iteration's total output at or below the previous one.
fn one_sided_base(base: &BoxSet) -> BoxSet {
    BoxSet::new(base.lower().to_vec(), vec![0.0; base.dim()]).expect("valid box")
}

fn reactor(name: &'static str, convexified: bool) -> Result<Scenario> {
    let model = plants::reactor()?;
    let ss = model
        .steady_state()
        .expect("reactor declares a steady state")
        .clone();
    let economic = QuadraticCost::linear(vec![0.0, 0.0, -1.0, 0.0], vec![0.0, 0.0]);
    let cost = if convexified {
        economic
            .with_quadratic(
                vec![0.36; 4],
                vec![0.002; 2],
                ss.state.clone(),
                ss.control.clone(),
            )?
            .normalized(&ss.state, &ss.control)
    } else {
        economic
    };
    let horizon = 5;
    let target = BoxSet::new(vec![0.0], vec![1.0])?;
    let base = one_sided_base(&crate::average::default_base(&target, horizon));
    let average =
        AverageConstraintSpec::new(Arc::new(ControlComponent { index: 0 }), target, base)?;
    let mut parameters = vec![
        param("x0", "(0, 0, 0, 0)"),
        param("sigma", "(1, 0.4)"),
        param("sampling time", "0.1 s (RK4)"),
        param(
            "steady state",
            "x_s = (0.3874, 1.5811, 0.3752, 0.2373), u_s = (1, 2.4310)",
        ),
        param("control box", "u1 in [0, 5], u2 in [0, 5]"),
        param("state box", "[0, 10]^4"),
        param("average constraint", "Av[u1] in [0, 1], Y0 = [-2.5, 0]"),
        param("N", horizon),
        param("T_sim", 600),
        param("iterations", 15),
    ];
    parameters.push(if convexified {
        param(
            "stage cost",
            "-x3 + 1/2 (|x - x_s|^2_Q + |u - u_s|^2_R) - l(x_s, u_s), Q = 0.36 I, R = 0.002 I",
        )
    } else {
        param("stage cost", "-x3")
    });
    Ok(Scenario {
        name,
        task: Task {
            model,
            cost: Arc::new(cost),
            x0: vec![0.0; 4],
            extension: ExtensionRule::Hold,
        },
        horizon,
        t_sim: 600,
        iterations: 15,
        metric: if convexified {
            Metric::Cumulative
        } else {
            Metric::Average
        },
        reference: None,
        average: Some(average),
        recipe: Recipe::RampToSteadyState { ramp_steps: 10 },
        parameters,
    })
}

pub fn make_scenario(name: &str) -> Result<Scenario> {
    match name {
        "linear-regulator" => Ok(regulator("linear-regulator", plants::linear_regulator()?)),
        "nonlinear-regulator" => Ok(regulator(
            "nonlinear-regulator",
            plants::nonlinear_regulator()?,
        )),
        "linear-tracker" => linear_tracker(),
        "unicycle" => unicycle(),
        "reactor-economic" => reactor("reactor-economic", false),
        "reactor-convexified" => reactor("reactor-convexified", true),
        other => Err(Error::UnknownScenario(other.into())),
    }
}

fn recipe_error(what: &str, sol: &NlpSolution) -> Error {
    Error::Recipe(format!(
        "{what} did not converge (status {:?}, terminal residual {:e}, box violation {:e})",
        sol.status, sol.terminal_residual, sol.box_violation
    ))
}

fn accept(sol: &NlpSolution) -> bool {
    sol.status != SolveStatus::InfeasibleStart
        && sol.terminal_residual <= 1e-7
        && sol.box_violation <= FEAS_TOL
}

/// Relaxed steering cost: control energy, a light state weight and a stiff
/// quadratic penalty for leaving a slightly shrunk state box.
struct SteerCost {
    state_weight: f64,
    penalty: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl StageCost for SteerCost {
    fn value(&self, _t: usize, x: &[f64], u: &[f64]) -> f64 {
        let mut v = math::norm_sq(u) + self.state_weight * math::norm_sq(x);
        for i in 0..x.len() {
            let out = (self.lower[i] - x[i]).max(x[i] - self.upper[i]).max(0.0);
            v += self.penalty * out * out;
        }
        v
    }

    fn gradient(&self, _t: usize, x: &[f64], u: &[f64], gx: &mut [f64], gu: &mut [f64]) {
        for (g, ui) in gu.iter_mut().zip(u) {
            *g = 2.0 * ui;
        }
        for i in 0..x.len() {
            gx[i] = 2.0 * self.state_weight * x[i];
            if x[i] > self.upper[i] {
                gx[i] += 2.0 * self.penalty * (x[i] - self.upper[i]);
            } else if x[i] < self.lower[i] {
                gx[i] -= 2.0 * self.penalty * (self.lower[i] - x[i]);
            }
        }
    }
}

pub const STEER_HORIZON: usize = 15;

fn steer_then_feedback(
    scenario: &Scenario,
    radius: f64,
    gain: &[f64],
    steps: usize,
) -> Result<Trajectory> {
    let model = scenario.model();
    let (n, m) = (model.n(), model.m());
    let x0 = &scenario.task.x0;
    // Open-loop steer from a solve with the state box relaxed into a
    // penalty, so that resting controls are an admissible start.
    let margin = 0.05;
    let steer_cost = SteerCost {
        state_weight: 0.1,
        penalty: 1e4,
        lower: model
            .state_box()
            .lower()
            .iter()
            .map(|l| l + margin)
            .collect(),
        upper: model
            .state_box()
            .upper()
            .iter()
            .map(|u| u - margin)
            .collect(),
    };
    let relaxed = model.clone().with_state_box(BoxSet::unbounded(n))?;
    let problem = NlpProblem::new(relaxed, Arc::new(steer_cost), STEER_HORIZON, x0.clone());
    let sol = Solver::default().solve(&problem, &vec![0.0; STEER_HORIZON * m])?;
    if sol.status == SolveStatus::InfeasibleStart {
        return Err(recipe_error("relaxed steer", &sol));
    }
    let plan = rollout(model, x0, &sol.controls)?;
    let switch = (0..=plan.len())
        .find(|&k| math::norm_inf(plan.state(k)) <= radius)
        .ok_or_else(|| {
            Error::Recipe("steer plan never reached the neighbourhood of the origin".into())
        })?;
    let mut controls = plan.controls_flat()[..switch * m].to_vec();
    let mut states = plan.states_flat()[..(switch + 1) * n].to_vec();
    let mut x = plan.state(switch).to_vec();
    let ubox = model.control_box();
    while controls.len() / m < steps {
        let mut u = vec![-math::dot(gain, &x)];
        ubox.project(&mut u);
        x = model.step(&x, &u)?;
        controls.extend_from_slice(&u);
        states.extend_from_slice(&x);
    }
    Trajectory::new(n, m, states, controls, Extension::None)
}

fn periodic_loop(scenario: &Scenario, loop_reference: &ReferenceSignal) -> Result<Trajectory> {
    let model = scenario.model();
    let m = model.m();
    let period = scenario
        .period()
        .ok_or_else(|| Error::Recipe("periodic loop needs a periodic scenario".into()))?;
    let components = scenario
        .reference
        .as_ref()
        .map_or(vec![0, 1], |r| r.components().to_vec());
    let cost = TrackingCost::new(loop_reference.clone(), components)?;
    let problem = NlpProblem::new(
        model.clone(),
        Arc::new(cost),
        period,
        scenario.task.x0.clone(),
    )
    .with_terminal(scenario.task.x0.clone());
    // Zero input keeps the plant at rest at x0, which closes the loop trivially.
    let rest = vec![0.0; period * m];
    if math::dist_inf(
        &model.step(&scenario.task.x0, &rest[..m])?,
        &scenario.task.x0,
    ) > 0.0
    {
        return Err(Error::Recipe(
            "x0 is not a rest point under zero input".into(),
        ));
    }
    let sol = Solver::default().solve(&problem, &rest)?;
    if !accept(&sol) {
        return Err(recipe_error("periodic loop", &sol));
    }
    let one = rollout(model, &scenario.task.x0, &sol.controls)?;
    // Repeat the loop over the simulation length; the seam is closed by
    // restarting exactly at x0.
    let reps = scenario.t_sim.div_ceil(period);
    let mut controls = Vec::with_capacity(reps * period * m);
    for _ in 0..reps {
        controls.extend_from_slice(one.controls_flat());
    }
    let mut states = Vec::new();
    for _ in 0..reps {
        let stored = one.states_flat();
        states.extend_from_slice(&stored[..stored.len() - model.n()]);
    }
    states.extend_from_slice(&scenario.task.x0);
    Trajectory::new(model.n(), m, states, controls, Extension::None)
}

fn ramp_to_steady_state(scenario: &Scenario, ramp_steps: usize) -> Result<Trajectory> {
    let model = scenario.model();
    let ss = model
        .steady_state()
        .ok_or_else(|| Error::Recipe("ramp recipe needs a steady state".into()))?;
    let m = model.m();
    let mut controls = Vec::with_capacity(scenario.t_sim * m);
    for k in 0..scenario.t_sim {
        let s = if ramp_steps == 0 {
            1.0
        } else {
            ((k + 1) as f64 / ramp_steps as f64).min(1.0)
        };
        controls.extend(ss.control.iter().map(|u| s * u));
    }
    rollout(model, &scenario.task.x0, &controls)
}

/// Builds the scenario's initial feasible trajectory, with its extension
/// attached, and verifies it.
pub fn generate_initial_trajectory(scenario: &Scenario) -> Result<Trajectory> {
    let model = scenario.model();
    let traj = match &scenario.recipe {
        Recipe::SteerThenFeedback { radius, gain } => {
            steer_then_feedback(scenario, *radius, gain, scenario.t_sim)?
        }
        Recipe::PeriodicLoop { loop_reference } => periodic_loop(scenario, loop_reference)?,
        Recipe::RampToSteadyState { ramp_steps } => ramp_to_steady_state(scenario, *ramp_steps)?,
    };
    let traj = traj.with_extension(scenario.task.extension_for()?)?;
    let report = check_feasible(&traj, model, FEAS_TOL);
    if !report.feasible {
        return Err(Error::Recipe(format!(
            "initial trajectory infeasible: dynamics {:e}, boxes {:e}",
            report.max_dynamics_residual,
            report.max_box_violation()
        )));
    }
    match traj.extension() {
        Extension::Hold { state, .. } => {
            let gap = model.state_distance(traj.state(traj.len()), state);
            if gap > 1e-9 {
                return Err(Error::Recipe(format!(
                    "initial trajectory ends {gap:e} away from the steady state; raise the simulation length"
                )));
            }
        }
        Extension::Periodic { period } => {
            let gap = traj.periodic_gap(model, *period);
            if gap > 1e-9 {
                return Err(Error::Recipe(format!(
                    "initial trajectory is not {period}-periodic (gap {gap:e})"
                )));
            }
        }
        Extension::None => {}
    }
    Ok(traj)
}

/// Optimal objective and trajectory of one long problem.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub objective: f64,
    pub trajectory: Trajectory,
    pub solution: NlpSolution,
}

/// Solves the single `T`-step problem from `x0` with `x(T) = x_s`,
/// warm-started from the initial trajectory.
pub fn oracle_long_horizon(scenario: &Scenario, horizon: usize) -> Result<OracleResult> {
    let model = scenario.model();
    let ss = model.steady_state().ok_or_else(|| {
        Error::InvalidConfig(format!("scenario `{}` has no steady state", scenario.name))
    })?;
    let initial = generate_initial_trajectory(scenario)?;
    let warm = initial.control_window(0, horizon)?;
    let problem = NlpProblem::new(
        model.clone(),
        scenario.cost().clone(),
        horizon,
        scenario.task.x0.clone(),
    )
    .with_terminal(ss.state.clone());
    let solution = Solver::default().solve(&problem, &warm)?;
    if solution.status == SolveStatus::InfeasibleStart {
        return Err(recipe_error("long-horizon oracle", &solution));
    }
    let trajectory =
        rollout(model, &scenario.task.x0, &solution.controls)?.with_extension(Extension::Hold {
            state: ss.state.clone(),
            control: ss.control.clone(),
        })?;
    Ok(OracleResult {
        objective: solution.objective,
        trajectory,
        solution,
    })
}

/// Best periodic trajectory: minimises the tracking error over one period
/// with `x(P) = x(0)` and a free initial state.
pub fn oracle_optimal_reachable(scenario: &Scenario) -> Result<OracleResult> {
    let reference = scenario.reference.as_ref().ok_or_else(|| {
        Error::InvalidConfig(format!("scenario `{}` has no reference", scenario.name))
    })?;
    let model = scenario.model();
    let period = reference.reference().period();
    let m = model.m();
    let mut problem = NlpProblem::new(
        model.clone(),
        Arc::new(reference.clone()),
        period,
        scenario.task.x0.clone(),
    );
    problem.initial = InitialCondition::Free {
        guess: scenario.task.x0.clone(),
    };
    problem.terminal = TerminalConstraint::Periodic;
    let solution = Solver::default().solve(&problem, &vec![0.0; period * m])?;
    if !accept(&solution) {
        return Err(recipe_error("optimal reachable trajectory", &solution));
    }
    let x0 = solution.state(0, model.n()).to_vec();
    let trajectory =
        rollout(model, &x0, &solution.controls)?.with_extension(Extension::Periodic { period })?;
    Ok(OracleResult {
        objective: solution.objective,
        trajectory,
        solution,
    })
}
