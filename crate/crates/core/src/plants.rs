//! The concrete plants used by the benchmark scenarios.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::dynamics::{discretize_rk4, BoxSet, Dynamics, LinearDynamics, PlantModel, VectorField};
use crate::error::Result;
use crate::math;

/// Double-integrator `A = [[1,1],[0,1]]`.
pub const DOUBLE_INTEGRATOR_A: [f64; 4] = [1.0, 1.0, 0.0, 1.0];

/// `x+ = A x + B u` with `B = (0, 1)^T`, states in `[-4, 4]^2`, `|u| <= 1`.
pub fn linear_regulator() -> Result<PlantModel> {
    let dynamics = LinearDynamics::new(2, 1, DOUBLE_INTEGRATOR_A.to_vec(), vec![0.0, 1.0])?;
    PlantModel::new(
        "linear-regulator",
        Arc::new(dynamics),
        BoxSet::symmetric(2, 4.0),
        BoxSet::symmetric(1, 1.0),
    )?
    .with_steady_state(vec![0.0, 0.0], vec![0.0])
}

/// `x+ = A x + g(x) + B u` with `g(x) = (x1 x2 (1 + sin(x1 x2)), 0)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NonlinearRegulatorDynamics;

impl Dynamics for NonlinearRegulatorDynamics {
    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn step(&self, x: &[f64], u: &[f64], next: &mut [f64]) {
        let p = x[0] * x[1];
        next[0] = x[0] + x[1] + p * (1.0 + math::sin(p));
        next[1] = x[1] + u[0];
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
        let p = x[0] * x[1];
        let dg = 1.0 + math::sin(p) + p * math::cos(p);
        jx.copy_from_slice(&[1.0 + dg * x[1], 1.0 + dg * x[0], 0.0, 1.0]);
        ju.copy_from_slice(&[0.0, 1.0]);
    }
}

pub fn nonlinear_regulator() -> Result<PlantModel> {
    PlantModel::new(
        "nonlinear-regulator",
        Arc::new(NonlinearRegulatorDynamics),
        BoxSet::symmetric(2, 4.0),
        BoxSet::symmetric(1, 1.0),
    )?
    .with_steady_state(vec![0.0, 0.0], vec![0.0])
}

/// Planar agent `x+ = A x + u`, states in `[-4, 5]^2`, `u` in `[-1, 1]^2`.
pub fn linear_tracker() -> Result<PlantModel> {
    let dynamics =
        LinearDynamics::new(2, 2, DOUBLE_INTEGRATOR_A.to_vec(), vec![1.0, 0.0, 0.0, 1.0])?;
    PlantModel::new(
        "linear-tracker",
        Arc::new(dynamics),
        BoxSet::uniform(2, -4.0, 5.0),
        BoxSet::symmetric(2, 1.0),
    )
}

/// Kinematic vehicle: state `(x, y, v, theta)`, control `(a, omega)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnicycleField;

impl VectorField for UnicycleField {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        dx[0] = x[2] * math::cos(x[3]);
        dx[1] = x[2] * math::sin(x[3]);
        dx[2] = u[0];
        dx[3] = u[1];
    }

    fn jacobian(&self, x: &[f64], _u: &[f64], jx: &mut [f64], ju: &mut [f64]) {
        let (s, c) = (math::sin(x[3]), math::cos(x[3]));
        jx.iter_mut().for_each(|v| *v = 0.0);
        jx[2] = c;
        jx[3] = -x[2] * s;
        jx[4 + 2] = s;
        jx[4 + 3] = x[2] * c;
        ju.copy_from_slice(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }
}

pub const UNICYCLE_DT: f64 = 0.1;
pub const UNICYCLE_MAX_ACCEL: f64 = 15.0;
pub const UNICYCLE_MAX_TURN_RATE: f64 = 12.0;

/// RK4-discretised unicycle (`dt = 0.1 s`), heading compared modulo `2 pi`.
pub fn unicycle() -> Result<PlantModel> {
    let dynamics = discretize_rk4(UnicycleField, UNICYCLE_DT)?;
    PlantModel::new(
        "unicycle",
        Arc::new(dynamics),
        BoxSet::unbounded(4),
        BoxSet::new(
            vec![-UNICYCLE_MAX_ACCEL, -UNICYCLE_MAX_TURN_RATE],
            vec![UNICYCLE_MAX_ACCEL, UNICYCLE_MAX_TURN_RATE],
        )?,
    )?
    .with_angles(vec![false, false, false, true])
}

/// Isothermal reactor with consecutive-competitive reactions
/// `P0 + B -> P1`, `P1 + B -> P2`; state is the concentrations of
/// `(P0, B, P1, P2)` and the controls are the inflow rates of `P0` and `B`.
#[derive(Debug, Clone, Copy)]
pub struct ReactorField {
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Default for ReactorField {
    fn default() -> Self {
        Self {
            sigma1: 1.0,
            sigma2: 0.4,
        }
    }
}

impl VectorField for ReactorField {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let r1 = self.sigma1 * x[0] * x[1];
        let r2 = self.sigma2 * x[1] * x[2];
        dx[0] = u[0] - x[0] - r1;
        dx[1] = u[1] - x[1] - r1 - r2;
        dx[2] = -x[2] + r1 - r2;
        dx[3] = -x[3] + r2;
    }

    fn jacobian(&self, x: &[f64], _u: &[f64], jx: &mut [f64], ju: &mut [f64]) {
        let (s1, s2) = (self.sigma1, self.sigma2);
        let r1 = [s1 * x[1], s1 * x[0], 0.0, 0.0];
        let r2 = [0.0, s2 * x[2], s2 * x[1], 0.0];
        for j in 0..4 {
            let e = |i: usize| if i == j { 1.0 } else { 0.0 };
            jx[j] = -e(0) - r1[j];
            jx[4 + j] = -e(1) - r1[j] - r2[j];
            jx[8 + j] = -e(2) + r1[j] - r2[j];
            jx[12 + j] = -e(3) + r2[j];
        }
        ju.copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}

pub const REACTOR_DT: f64 = 0.1;
/// Steady-state inflow rates.
pub const REACTOR_STEADY_CONTROL: [f64; 2] = [1.0, 2.4310];
/// Published (4-digit) steady-state concentrations.
pub const REACTOR_STEADY_STATE_ROUNDED: [f64; 4] = [0.3874, 1.5811, 0.3752, 0.2373];
pub const REACTOR_MAX_INFLOW: [f64; 2] = [5.0, 5.0];
pub const REACTOR_MAX_CONCENTRATION: f64 = 10.0;

/// Newton iteration for `F(x, u) = 0` starting at `guess`.
pub fn equilibrium<F: VectorField>(field: &F, u: &[f64], guess: &[f64]) -> Vec<f64> {
    let n = field.state_dim();
    let m = field.control_dim();
    let mut x = guess.to_vec();
    let mut f = vec![0.0; n];
    let mut jx = vec![0.0; n * n];
    let mut ju = vec![0.0; n * m];
    for _ in 0..50 {
        field.eval(&x, u, &mut f);
        if math::norm_inf(&f) < 1e-15 {
            break;
        }
        field.jacobian(&x, u, &mut jx, &mut ju);
        // J^T J dx = -J^T f keeps the Cholesky solver applicable.
        let mut jtj = vec![0.0; n * n];
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                jtj[i * n + j] = (0..n).map(|r| jx[r * n + i] * jx[r * n + j]).sum();
            }
            rhs[i] = -(0..n).map(|r| jx[r * n + i] * f[r]).sum::<f64>();
        }
        math::solve_regularized(&jtj, n, &mut rhs);
        for (xi, d) in x.iter_mut().zip(&rhs) {
            *xi += d;
        }
    }
    x
}

/// RK4-discretised reactor (`dt = 0.1 s`) with the steady state refined
/// by Newton's method from the published 4-digit values.
pub fn reactor() -> Result<PlantModel> {
    let field = ReactorField::default();
    let xs = equilibrium(
        &field,
        &REACTOR_STEADY_CONTROL,
        &REACTOR_STEADY_STATE_ROUNDED,
    );
    let dynamics = discretize_rk4(field, REACTOR_DT)?;
    PlantModel::new(
        "reactor",
        Arc::new(dynamics),
        BoxSet::uniform(4, 0.0, REACTOR_MAX_CONCENTRATION),
        BoxSet::new(vec![0.0, 0.0], REACTOR_MAX_INFLOW.to_vec())?,
    )?
    .with_steady_state(xs, REACTOR_STEADY_CONTROL.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::rollout;

    fn fd_check(model: &PlantModel, x: &[f64], u: &[f64]) {
        let n = model.n();
        let m = model.m();
        let mut next = vec![0.0; n];
        let mut jx = vec![0.0; n * n];
        let mut ju = vec![0.0; n * m];
        model
            .dynamics()
            .step_jacobian(x, u, &mut next, &mut jx, &mut ju);
        let h = 1e-6;
        for j in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let fp = model.step(&xp, u).unwrap();
            let fm = model.step(&xm, u).unwrap();
            for i in 0..n {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!(
                    (fd - jx[i * n + j]).abs() < 1e-7 * (1.0 + fd.abs()),
                    "{} dx {i},{j}",
                    model.name()
                );
            }
        }
        for j in 0..m {
            let mut up = u.to_vec();
            let mut um = u.to_vec();
            up[j] += h;
            um[j] -= h;
            let fp = model.step(x, &up).unwrap();
            let fm = model.step(x, &um).unwrap();
            for i in 0..n {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!(
                    (fd - ju[i * m + j]).abs() < 1e-7 * (1.0 + fd.abs()),
                    "{} du {i},{j}",
                    model.name()
                );
            }
        }
    }

    #[test]
    fn analytic_jacobians_match_differences() {
        fd_check(&nonlinear_regulator().unwrap(), &[-1.3, 0.7], &[0.2]);
        fd_check(&unicycle().unwrap(), &[1.0, 2.0, 3.0, 0.7], &[4.0, -2.0]);
        fd_check(&reactor().unwrap(), &[0.4, 1.5, 0.3, 0.2], &[1.2, 2.0]);
        fd_check(&linear_tracker().unwrap(), &[0.4, 1.5], &[0.3, -0.2]);
    }

    #[test]
    fn nonlinear_regulator_matches_hand_evaluation() {
        let model = nonlinear_regulator().unwrap();
        let (x1, x2) = (-3.95_f64, -0.05_f64);
        let p = x1 * x2;
        let expected = [x1 + x2 + p * (1.0 + p.sin()), x2 + 1.0];
        let next = model.step(&[x1, x2], &[1.0]).unwrap();
        assert!(math::dist_inf(&next, &expected) < 1e-15);
    }

    #[test]
    fn reactor_published_steady_state_is_near_fixed_point() {
        let model = reactor().unwrap();
        let next = model
            .step(&REACTOR_STEADY_STATE_ROUNDED, &REACTOR_STEADY_CONTROL)
            .unwrap();
        assert!(math::dist_inf(&next, &REACTOR_STEADY_STATE_ROUNDED) <= 1e-5);
        let ss = model.steady_state().unwrap();
        assert!(math::dist_inf(&ss.state, &REACTOR_STEADY_STATE_ROUNDED) < 1e-4);
        let next = model.step(&ss.state, &ss.control).unwrap();
        assert!(math::dist_inf(&next, &ss.state) < 1e-12);
    }

    #[test]
    fn reactor_holds_steady_state_for_fifty_steps() {
        let model = reactor().unwrap();
        let ss = model.steady_state().unwrap().clone();
        let controls: Vec<f64> = (0..50).flat_map(|_| ss.control.clone()).collect();
        let traj = rollout(&model, &ss.state, &controls).unwrap();
        for k in 0..=50 {
            assert!(math::dist_inf(traj.state(k), &ss.state) < 1e-4);
        }
    }
}
