//! Plant models, box constraint sets, trajectories and simulation primitives.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{check_dim, Error, Result};
use crate::math;

/// Dynamics residual tolerance used when validating stored trajectories.
pub const DYNAMICS_TOL: f64 = 1e-8;
/// Default feasibility tolerance for box membership.
pub const FEAS_TOL: f64 = 1e-6;
/// Maximum allowed `|f(x_s,u_s) - x_s|` for a declared steady state.
pub const STEADY_STATE_TOL: f64 = 1e-6;

/// Componentwise interval set `lower <= v <= upper`; infinite bounds allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u {
                return Err(Error::InvalidConfig(format!(
                    "box component {i}: lower {l} > upper {u}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(dim: usize, radius: f64) -> Self {
        Self {
            lower: vec![-radius; dim],
            upper: vec![radius; dim],
        }
    }

    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Self {
        Self {
            lower: vec![lower; dim],
            upper: vec![upper; dim],
        }
    }

    pub fn unbounded(dim: usize) -> Self {
        Self::symmetric(dim, f64::INFINITY)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.iter().chain(&self.upper).all(|b| b.is_finite())
    }

    /// Per-component distance outside the box (zero inside or on the boundary).
    pub fn violations(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (l, u))| (l - x).max(x - u).max(0.0))
            .collect()
    }

    pub fn max_violation(&self, v: &[f64]) -> f64 {
        self.violations(v).into_iter().fold(0.0, f64::max)
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        v.len() == self.dim() && self.max_violation(v) <= tol
    }

    pub fn project(&self, v: &mut [f64]) {
        for (x, (l, u)) in v.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *x = x.clamp(*l, *u);
        }
    }

    /// Half-widths of the box; infinite for unbounded components.
    pub fn half_widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (u - l))
            .collect()
    }
}

/// Discrete-time step map `x+ = f(x, u)`.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    fn step(&self, x: &[f64], u: &[f64], next: &mut [f64]);

    /// Writes `f(x,u)` and the row-major Jacobians `df/dx` (n x n) and
    /// `df/du` (n x m). The default uses central differences.
    fn step_jacobian(
        &self,
        x: &[f64],
        u: &[f64],
        next: &mut [f64],
        jx: &mut [f64],
        ju: &mut [f64],
    ) {
        self.step(x, u, next);
        let n = self.state_dim();
        let m = self.control_dim();
        fd_jacobian(n, m, x, u, jx, ju, |xx, uu, out| self.step(xx, uu, out));
    }
}

/// Continuous-time vector field `dx/dt = F(x, u)`.
pub trait VectorField: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    fn eval(&self, x: &[f64], u: &[f64], dx: &mut [f64]);

    /// Row-major Jacobians `dF/dx` and `dF/du`. Defaults to central differences.
    fn jacobian(&self, x: &[f64], u: &[f64], jx: &mut [f64], ju: &mut [f64]) {
        let n = self.state_dim();
        let m = self.control_dim();
        fd_jacobian(n, m, x, u, jx, ju, |xx, uu, out| self.eval(xx, uu, out));
    }
}

fn fd_jacobian<F: Fn(&[f64], &[f64], &mut [f64])>(
    n: usize,
    m: usize,
    x: &[f64],
    u: &[f64],
    jx: &mut [f64],
    ju: &mut [f64],
    f: F,
) {
    let mut xp = x.to_vec();
    let mut up = u.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        f(&xp, u, &mut fp);
        xp[j] = x[j] - h;
        f(&xp, u, &mut fm);
        xp[j] = x[j];
        for i in 0..n {
            jx[i * n + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    for j in 0..m {
        let h = 1e-6 * u[j].abs().max(1.0);
        up[j] = u[j] + h;
        f(x, &up, &mut fp);
        up[j] = u[j] - h;
        f(x, &up, &mut fm);
        up[j] = u[j];
        for i in 0..n {
            ju[i * m + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
}

/// One classical fourth-order Runge-Kutta step of a vector field.
#[derive(Debug, Clone)]
pub struct Rk4<F> {
    field: F,
    dt: f64,
}

/// Discretises `field` with a single RK4 update per sampling interval `dt`.
pub fn discretize_rk4<F: VectorField>(field: F, dt: f64) -> Result<Rk4<F>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "sampling time must be positive, got {dt}"
        )));
    }
    Ok(Rk4 { field, dt })
}

impl<F> Rk4<F> {
    pub fn field(&self) -> &F {
        &self.field
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

impl<F: VectorField> Dynamics for Rk4<F> {
    fn state_dim(&self) -> usize {
        self.field.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.field.control_dim()
    }

    fn step(&self, x: &[f64], u: &[f64], next: &mut [f64]) {
        let n = x.len();
        let h = self.dt;
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        self.field.eval(x, u, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        self.field.eval(&tmp, u, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        self.field.eval(&tmp, u, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + h * k3[i];
        }
        self.field.eval(&tmp, u, &mut k4);
        for i in 0..n {
            next[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }

    fn step_jacobian(
        &self,
        x: &[f64],
        u: &[f64],
        next: &mut [f64],
        jx: &mut [f64],
        ju: &mut [f64],
    ) {
        // Differentiates the four stages exactly: for stage s evaluated at
        // y_s = x + c_s h k_{s-1}, dk_s = Fx(y_s) dy_s + Fu(y_s) du.
        let n = x.len();
        let m = u.len();
        let h = self.dt;
        let coeffs = [0.0, 0.5 * h, 0.5 * h, h];
        let weights = [1.0, 2.0, 2.0, 1.0];
        let mut k_prev = vec![0.0; n];
        let mut dk_dx_prev = vec![0.0; n * n];
        let mut dk_du_prev = vec![0.0; n * m];
        let mut y = vec![0.0; n];
        let mut k = vec![0.0; n];
        let mut fx = vec![0.0; n * n];
        let mut fu = vec![0.0; n * m];
        let mut dy_dx = vec![0.0; n * n];
        let mut dy_du = vec![0.0; n * m];
        let mut dk_dx = vec![0.0; n * n];
        let mut dk_du = vec![0.0; n * m];
        let mut acc = vec![0.0; n];
        let mut acc_dx = vec![0.0; n * n];
        let mut acc_du = vec![0.0; n * m];

        for (&c, &w) in coeffs.iter().zip(&weights) {
            for i in 0..n {
                y[i] = x[i] + c * k_prev[i];
                for j in 0..n {
                    dy_dx[i * n + j] = if i == j { 1.0 } else { 0.0 } + c * dk_dx_prev[i * n + j];
                }
                for j in 0..m {
                    dy_du[i * m + j] = c * dk_du_prev[i * m + j];
                }
            }
            self.field.eval(&y, u, &mut k);
            self.field.jacobian(&y, u, &mut fx, &mut fu);
            for i in 0..n {
                for j in 0..n {
                    let mut sum = 0.0;
                    for l in 0..n {
                        sum += fx[i * n + l] * dy_dx[l * n + j];
                    }
                    dk_dx[i * n + j] = sum;
                }
                for j in 0..m {
                    let mut sum = fu[i * m + j];
                    for l in 0..n {
                        sum += fx[i * n + l] * dy_du[l * m + j];
                    }
                    dk_du[i * m + j] = sum;
                }
            }
            for i in 0..n {
                acc[i] += w * k[i];
            }
            for (a, d) in acc_dx.iter_mut().zip(&dk_dx) {
                *a += w * d;
            }
            for (a, d) in acc_du.iter_mut().zip(&dk_du) {
                *a += w * d;
            }
            k_prev.copy_from_slice(&k);
            dk_dx_prev.copy_from_slice(&dk_dx);
            dk_du_prev.copy_from_slice(&dk_du);
        }
        for i in 0..n {
            next[i] = x[i] + h / 6.0 * acc[i];
            for j in 0..n {
                jx[i * n + j] = if i == j { 1.0 } else { 0.0 } + h / 6.0 * acc_dx[i * n + j];
            }
            for j in 0..m {
                ju[i * m + j] = h / 6.0 * acc_du[i * m + j];
            }
        }
    }
}

/// Linear time-invariant map `x+ = A x + B u` (row-major `A`, `B`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    n: usize,
    m: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl LinearDynamics {
    pub fn new(n: usize, m: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        check_dim(n * n, a.len())?;
        check_dim(n * m, b.len())?;
        Ok(Self { n, m, a, b })
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }
}

impl Dynamics for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn control_dim(&self) -> usize {
        self.m
    }

    fn step(&self, x: &[f64], u: &[f64], next: &mut [f64]) {
        for i in 0..self.n {
            next[i] = math::dot(&self.a[i * self.n..(i + 1) * self.n], x)
                + math::dot(&self.b[i * self.m..(i + 1) * self.m], u);
        }
    }

    fn step_jacobian(
        &self,
        x: &[f64],
        u: &[f64],
        next: &mut [f64],
        jx: &mut [f64],
        ju: &mut [f64],
    ) {
        self.step(x, u, next);
        jx.copy_from_slice(&self.a);
        ju.copy_from_slice(&self.b);
    }
}

/// A declared equilibrium `x_s = f(x_s, u_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub state: Vec<f64>,
    pub control: Vec<f64>,
}

/// Discrete-time plant: dynamics plus state/control boxes.
#[derive(Clone)]
pub struct PlantModel {
    name: &'static str,
    dynamics: Arc<dyn Dynamics>,
    state_box: BoxSet,
    control_box: BoxSet,
    steady_state: Option<SteadyState>,
    /// Components measured modulo 2*pi when comparing states.
    angles: Vec<bool>,
}

impl fmt::Debug for PlantModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlantModel")
            .field("name", &self.name)
            .field("n", &self.n())
            .field("m", &self.m())
            .field("state_box", &self.state_box)
            .field("control_box", &self.control_box)
            .field("steady_state", &self.steady_state)
            .finish()
    }
}

impl PlantModel {
    pub fn new(
        name: &'static str,
        dynamics: Arc<dyn Dynamics>,
        state_box: BoxSet,
        control_box: BoxSet,
    ) -> Result<Self> {
        check_dim(dynamics.state_dim(), state_box.dim())?;
        check_dim(dynamics.control_dim(), control_box.dim())?;
        let n = dynamics.state_dim();
        Ok(Self {
            name,
            dynamics,
            state_box,
            control_box,
            steady_state: None,
            angles: vec![false; n],
        })
    }

    /// Declares `(x_s, u_s)`; rejected unless `|f(x_s,u_s) - x_s|_inf <= 1e-6`.
    pub fn with_steady_state(mut self, state: Vec<f64>, control: Vec<f64>) -> Result<Self> {
        check_dim(self.n(), state.len())?;
        check_dim(self.m(), control.len())?;
        let next = self.step(&state, &control)?;
        let residual = math::dist_inf(&next, &state);
        if residual > STEADY_STATE_TOL {
            return Err(Error::InvalidConfig(format!(
                "declared steady state is not a fixed point (residual {residual:e})"
            )));
        }
        self.steady_state = Some(SteadyState { state, control });
        Ok(self)
    }

    /// Same plant with a different state box.
    pub fn with_state_box(mut self, state_box: BoxSet) -> Result<Self> {
        check_dim(self.n(), state_box.dim())?;
        self.state_box = state_box;
        Ok(self)
    }

    pub fn with_angles(mut self, angles: Vec<bool>) -> Result<Self> {
        check_dim(self.n(), angles.len())?;
        self.angles = angles;
        Ok(self)
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn n(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn m(&self) -> usize {
        self.dynamics.control_dim()
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    pub fn state_box(&self) -> &BoxSet {
        &self.state_box
    }

    pub fn control_box(&self) -> &BoxSet {
        &self.control_box
    }

    pub fn steady_state(&self) -> Option<&SteadyState> {
        self.steady_state.as_ref()
    }

    pub fn angles(&self) -> &[bool] {
        &self.angles
    }

    /// `f(x, u)`; no constraint check is performed.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.n(), x.len())?;
        check_dim(self.m(), u.len())?;
        let mut next = vec![0.0; self.n()];
        self.dynamics.step(x, u, &mut next);
        Ok(next)
    }

    /// `a - b`, with angle components wrapped into `(-pi, pi]`.
    pub fn state_diff(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        for i in 0..a.len() {
            let d = a[i] - b[i];
            out[i] = if self.angles[i] {
                math::wrap_angle(d)
            } else {
                d
            };
        }
    }

    pub fn state_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut d = vec![0.0; a.len()];
        self.state_diff(a, b, &mut d);
        math::norm_inf(&d)
    }
}

/// Convenience wrapper matching the free-function form of the step operation.
pub fn step(model: &PlantModel, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    model.step(x, u)
}

/// How a trajectory continues past its stored range.
#[derive(Debug, Clone, PartialEq)]
pub enum Extension {
    None,
    /// Steady-state hold `(x_s, u_s)` forever.
    Hold {
        state: Vec<f64>,
        control: Vec<f64>,
    },
    /// Repeats the last `period` stored samples.
    Periodic {
        period: usize,
    },
}

/// State/control sequences of one closed-loop run, stored flat.
///
/// `states` has `len() + 1` rows, `controls` has `len()` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    n: usize,
    m: usize,
    states: Vec<f64>,
    controls: Vec<f64>,
    extension: Extension,
}

impl Trajectory {
    pub fn new(
        n: usize,
        m: usize,
        states: Vec<f64>,
        controls: Vec<f64>,
        extension: Extension,
    ) -> Result<Self> {
        if n == 0 || states.len() % n != 0 || states.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "state storage of length {} is not a positive multiple of n={n}",
                states.len()
            )));
        }
        let steps = states.len() / n - 1;
        check_dim(steps * m, controls.len())?;
        let traj = Self {
            n,
            m,
            states,
            controls,
            extension: Extension::None,
        };
        traj.with_extension(extension)
    }

    pub fn with_extension(mut self, extension: Extension) -> Result<Self> {
        match &extension {
            Extension::None => {}
            Extension::Hold { state, control } => {
                check_dim(self.n, state.len())?;
                check_dim(self.m, control.len())?;
            }
            Extension::Periodic { period } => {
                if *period == 0 || *period > self.len() {
                    return Err(Error::InvalidConfig(format!(
                        "period {period} must be in 1..={}",
                        self.len()
                    )));
                }
            }
        }
        self.extension = extension;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of stored steps `T` (controls); there are `T + 1` states.
    pub fn len(&self) -> usize {
        self.controls.len() / self.m.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extension(&self) -> &Extension {
        &self.extension
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }

    pub fn control(&self, k: usize) -> &[f64] {
        &self.controls[k * self.m..(k + 1) * self.m]
    }

    pub fn states_flat(&self) -> &[f64] {
        &self.states
    }

    pub fn controls_flat(&self) -> &[f64] {
        &self.controls
    }

    fn extended_index(&self, k: usize) -> Option<usize> {
        let t = self.len();
        match self.extension {
            Extension::Periodic { period } => Some(t - period + (k - t) % period),
            _ => None,
        }
    }

    /// State at index `k`, using the extension rule past the stored range.
    pub fn lookup_state(&self, k: usize) -> Result<&[f64]> {
        if k <= self.len() {
            return Ok(self.state(k));
        }
        match &self.extension {
            Extension::None => Err(Error::BeyondStorage {
                index: k,
                len: self.len(),
            }),
            Extension::Hold { state, .. } => Ok(state),
            Extension::Periodic { .. } => Ok(self.state(self.extended_index(k).unwrap())),
        }
    }

    /// Control at index `k`, using the extension rule past the stored range.
    pub fn lookup_control(&self, k: usize) -> Result<&[f64]> {
        if k < self.len() {
            return Ok(self.control(k));
        }
        match &self.extension {
            Extension::None => Err(Error::BeyondStorage {
                index: k,
                len: self.len(),
            }),
            Extension::Hold { control, .. } => Ok(control),
            Extension::Periodic { .. } => Ok(self.control(self.extended_index(k).unwrap())),
        }
    }

    /// `(state, control)` pair at `k`; both must be available.
    pub fn extend_lookup(&self, k: usize) -> Result<(&[f64], &[f64])> {
        Ok((self.lookup_state(k)?, self.lookup_control(k)?))
    }

    /// First `count` controls (through the extension if needed), flattened.
    pub fn control_window(&self, start: usize, count: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count * self.m);
        for k in start..start + count {
            out.extend_from_slice(self.lookup_control(k)?);
        }
        Ok(out)
    }

    /// Gap `states[T] - states[T - P]` that a periodic extension must close.
    pub fn periodic_gap(&self, model: &PlantModel, period: usize) -> f64 {
        let t = self.len();
        if period == 0 || period > t {
            return f64::INFINITY;
        }
        model.state_distance(self.state(t), self.state(t - period))
    }

    /// Truncates to the first `steps` steps (keeps `steps + 1` states).
    pub fn truncated(&self, steps: usize) -> Trajectory {
        let steps = steps.min(self.len());
        Trajectory {
            n: self.n,
            m: self.m,
            states: self.states[..(steps + 1) * self.n].to_vec(),
            controls: self.controls[..steps * self.m].to_vec(),
            extension: Extension::None,
        }
    }
}

/// Simulates `controls` (flattened, `m` per step) from `x0`; extension `None`.
pub fn rollout(model: &PlantModel, x0: &[f64], controls: &[f64]) -> Result<Trajectory> {
    let n = model.n();
    let m = model.m();
    check_dim(n, x0.len())?;
    if controls.len() % m != 0 {
        return Err(Error::DimensionMismatch {
            expected: (controls.len() / m + 1) * m,
            got: controls.len(),
        });
    }
    let steps = controls.len() / m;
    let mut states = Vec::with_capacity((steps + 1) * n);
    states.extend_from_slice(x0);
    let mut next = vec![0.0; n];
    for k in 0..steps {
        model.dynamics().step(
            &states[k * n..(k + 1) * n],
            &controls[k * m..(k + 1) * m],
            &mut next,
        );
        states.extend_from_slice(&next);
    }
    Trajectory::new(n, m, states, controls.to_vec(), Extension::None)
}

/// Residuals of a trajectory against the plant's dynamics and boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub max_dynamics_residual: f64,
    /// Worst violation of each state-box component over the stored states.
    pub state_violation: Vec<f64>,
    /// Worst violation of each control-box component over the stored controls.
    pub control_violation: Vec<f64>,
    pub feasible: bool,
}

impl FeasibilityReport {
    pub fn max_box_violation(&self) -> f64 {
        self.state_violation
            .iter()
            .chain(&self.control_violation)
            .fold(0.0, |m, v| m.max(*v))
    }
}

/// Checks dynamics consistency and box membership; never fails.
pub fn check_feasible(traj: &Trajectory, model: &PlantModel, tol: f64) -> FeasibilityReport {
    let n = model.n();
    let mut state_violation = vec![0.0; n];
    let mut control_violation = vec![0.0; model.m()];
    let mut max_dyn = 0.0_f64;
    if traj.n() != n || traj.m() != model.m() {
        return FeasibilityReport {
            max_dynamics_residual: f64::INFINITY,
            state_violation,
            control_violation,
            feasible: false,
        };
    }
    let mut next = vec![0.0; n];
    for k in 0..=traj.len() {
        let x = traj.state(k);
        for (acc, v) in state_violation
            .iter_mut()
            .zip(model.state_box().violations(x))
        {
            *acc = acc.max(v);
        }
        if k < traj.len() {
            let u = traj.control(k);
            for (acc, v) in control_violation
                .iter_mut()
                .zip(model.control_box().violations(u))
            {
                *acc = acc.max(v);
            }
            model.dynamics().step(x, u, &mut next);
            max_dyn = max_dyn.max(model.state_distance(&next, traj.state(k + 1)));
        }
    }
    let finite = traj
        .states_flat()
        .iter()
        .chain(traj.controls_flat())
        .all(|v| v.is_finite());
    let worst_box = state_violation
        .iter()
        .chain(&control_violation)
        .fold(0.0_f64, |m, v| m.max(*v));
    FeasibilityReport {
        max_dynamics_residual: max_dyn,
        feasible: finite && max_dyn <= tol && worst_box <= tol,
        state_violation,
        control_violation,
    }
}
