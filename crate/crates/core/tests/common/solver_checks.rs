//! Solver checks shared by the core test suite and the acceptance suite:
//! adjoint gradient against central differences, agreement with a dense KKT
//! solve on LQ problems without boxes, and the descent contract from
//! feasible warm starts. Each returns a one-line summary or the first
//! failure.

use std::sync::Arc;

use ilempc_core::dynamics::LinearDynamics;
use ilempc_core::math::PI;
use ilempc_core::scenario::make_scenario;
use ilempc_core::solver::{self, SolveStatus};
use ilempc_core::{
    check_feasible, rollout, BoxSet, NlpProblem, PlantModel, QuadraticCost, Solver, StageCost,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PLANT_SCENARIOS: [&str; 6] = [
    "linear-regulator",
    "nonlinear-regulator",
    "linear-tracker",
    "unicycle",
    "reactor-economic",
    "reactor-convexified",
];

fn random_state(rng: &mut ChaCha8Rng, model: &PlantModel) -> Vec<f64> {
    match model.name() {
        "unicycle" => vec![
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-PI..PI),
        ],
        "reactor" => {
            let xs = &model.steady_state().unwrap().state;
            xs.iter()
                .map(|v| (v + rng.gen_range(-0.3..0.3)).max(0.0))
                .collect()
        }
        _ => {
            let b = model.state_box();
            (0..model.n())
                .map(|i| rng.gen_range(b.lower()[i]..b.upper()[i]))
                .collect()
        }
    }
}

fn random_controls(rng: &mut ChaCha8Rng, model: &PlantModel, steps: usize, scale: f64) -> Vec<f64> {
    let b = model.control_box();
    let mut u = Vec::with_capacity(steps * model.m());
    for _ in 0..steps {
        for i in 0..model.m() {
            let (lo, hi) = (b.lower()[i], b.upper()[i]);
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo) * scale;
            u.push(rng.gen_range(mid - half..=mid + half));
        }
    }
    u
}

pub fn gradient_check(instances: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0_f64;
    for instance in 0..instances {
        let scenario = make_scenario(PLANT_SCENARIOS[instance % PLANT_SCENARIOS.len()]).unwrap();
        let model = scenario.model().clone();
        let horizon = rng.gen_range(1..=6);
        // Instances are drawn inside the region the solver works in: the
        // rollout must respect the state box.
        let (x0, controls) = loop {
            let x0 = random_state(&mut rng, &model);
            let controls = random_controls(&mut rng, &model, horizon, 0.9);
            if check_feasible(&rollout(&model, &x0, &controls).unwrap(), &model, 0.0).feasible {
                break (x0, controls);
            }
        };
        let problem = NlpProblem::new(model, scenario.cost().clone(), horizon, x0)
            .with_time_offset(rng.gen_range(0..40));
        let analytic = solver::gradient(&problem, &controls).unwrap();
        let mut fd = vec![0.0; controls.len()];
        for i in 0..controls.len() {
            let h = 1e-6 * controls[i].abs().max(1.0);
            let mut up = controls.clone();
            let mut down = controls.clone();
            up[i] += h;
            down[i] -= h;
            fd[i] = (solver::evaluate_objective(&problem, &up).unwrap()
                - solver::evaluate_objective(&problem, &down).unwrap())
                / (2.0 * h);
        }
        let scale = analytic.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
        let err = analytic
            .iter()
            .zip(&fd)
            .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()))
            / scale;
        worst = worst.max(err);
        if err > 1e-4 {
            return Err(format!(
                "instance {instance} ({}): relative error {err:e}",
                scenario.name
            ));
        }
    }
    Ok(format!(
        "{instances} instances, worst relative error {worst:.1e}"
    ))
}

/// Full-space KKT solve of `min sum_{i<N} l(x_i, u_i)` subject to the
/// linear dynamics and an optional terminal equality.
fn kkt_objective(
    a: &[f64],
    b: &[f64],
    n: usize,
    m: usize,
    horizon: usize,
    cost: &QuadraticCost,
    x0: &[f64],
    target: Option<&[f64]>,
) -> f64 {
    // y = [x_1 .. x_N, u_0 .. u_{N-1}]
    let nx = horizon * n;
    let nv = nx + horizon * m;
    let ncon = nx + if target.is_some() { n } else { 0 };
    let mut h = DMatrix::<f64>::zeros(nv, nv);
    let mut g = DVector::<f64>::zeros(nv);
    let half_ur: f64 = (0..m)
        .map(|i| 0.5 * cost.r[i] * cost.u_ref[i] * cost.u_ref[i])
        .sum();
    let half_xr: f64 = (0..n)
        .map(|i| 0.5 * cost.q[i] * cost.x_ref[i] * cost.x_ref[i])
        .sum();
    // state part of stage 0 is fixed; the rest expands into constants
    let constant = cost.value(0, x0, &vec![0.0; m]) - half_ur
        + (horizon - 1) as f64 * half_xr
        + horizon as f64 * half_ur;
    for k in 1..horizon {
        for i in 0..n {
            let idx = (k - 1) * n + i;
            h[(idx, idx)] = cost.q[i];
            g[idx] = cost.linear_x[i] - cost.q[i] * cost.x_ref[i];
        }
    }
    for k in 0..horizon {
        for i in 0..m {
            let idx = nx + k * m + i;
            h[(idx, idx)] = cost.r[i];
            g[idx] = cost.linear_u[i] - cost.r[i] * cost.u_ref[i];
        }
    }
    let mut c = DMatrix::<f64>::zeros(ncon, nv);
    let mut rhs = DVector::<f64>::zeros(ncon);
    for k in 0..horizon {
        for i in 0..n {
            let row = k * n + i;
            c[(row, k * n + i)] = 1.0;
            for j in 0..n {
                if k == 0 {
                    rhs[row] += a[i * n + j] * x0[j];
                } else {
                    c[(row, (k - 1) * n + j)] -= a[i * n + j];
                }
            }
            for j in 0..m {
                c[(row, nx + k * m + j)] -= b[i * m + j];
            }
        }
    }
    if let Some(t) = target {
        for i in 0..n {
            c[(nx + i, (horizon - 1) * n + i)] = 1.0;
            rhs[nx + i] = t[i];
        }
    }
    let dim = nv + ncon;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    kkt.view_mut((0, 0), (nv, nv)).copy_from(&h);
    kkt.view_mut((nv, 0), (ncon, nv)).copy_from(&c);
    kkt.view_mut((0, nv), (nv, ncon)).copy_from(&c.transpose());
    let mut r = DVector::<f64>::zeros(dim);
    r.rows_mut(0, nv).copy_from(&(-&g));
    r.rows_mut(nv, ncon).copy_from(&rhs);
    let sol = kkt.lu().solve(&r).expect("KKT system is nonsingular");
    let y = sol.rows(0, nv);
    (0.5 * y.dot(&(&h * y)) + g.dot(&y)) + constant
}

pub fn kkt_check(instances: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0_f64;
    for instance in 0..instances {
        let n = rng.gen_range(2..=3);
        let m = rng.gen_range(1..=2);
        let horizon = rng.gen_range(n..=6);
        let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let model = PlantModel::new(
            "random-lq",
            Arc::new(LinearDynamics::new(n, m, a.clone(), b.clone()).unwrap()),
            BoxSet::unbounded(n),
            BoxSet::unbounded(m),
        )
        .unwrap();
        let cost = QuadraticCost::linear(
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .with_quadratic(
            (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
            (0..m).map(|_| rng.gen_range(0.5..2.0)).collect(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let warm: Vec<f64> = (0..horizon * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pinned = instance % 2 == 0;
        let mut problem =
            NlpProblem::new(model.clone(), Arc::new(cost.clone()), horizon, x0.clone());
        let target = rollout(&model, &x0, &warm).unwrap().state(horizon).to_vec();
        if pinned {
            problem = problem.with_terminal(target.clone());
        }
        let solution = Solver::default().solve(&problem, &warm).unwrap();
        let oracle = kkt_objective(
            &a,
            &b,
            n,
            m,
            horizon,
            &cost,
            &x0,
            pinned.then_some(target.as_slice()),
        );
        let err = (solution.objective - oracle).abs();
        worst = worst.max(err);
        if err > 1e-6 * oracle.abs().max(1.0) {
            return Err(format!(
                "instance {instance}: solver {} vs KKT {oracle} (status {:?})",
                solution.objective, solution.status
            ));
        }
    }
    Ok(format!(
        "{instances} instances, worst objective gap {worst:.1e}"
    ))
}

pub fn descent_check(instances: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut checked = 0;
    let mut attempts = 0;
    let mut worst = f64::NEG_INFINITY;
    while checked < instances {
        attempts += 1;
        if attempts >= 2000 {
            return Err("could not draw feasible instances".into());
        }
        let scenario = make_scenario(PLANT_SCENARIOS[attempts % PLANT_SCENARIOS.len()]).unwrap();
        let model = scenario.model().clone();
        let horizon = rng.gen_range(1..=5);
        let x0 = random_state(&mut rng, &model);
        let scale = if model.name() == "reactor" { 0.1 } else { 0.5 };
        let mut warm = random_controls(&mut rng, &model, horizon, scale);
        if model.name() == "reactor" {
            let us = &model.steady_state().unwrap().control;
            for (i, u) in warm.iter_mut().enumerate() {
                *u = (us[i % 2] + (*u - 2.5)).clamp(0.0, 5.0);
            }
        }
        let path = rollout(&model, &x0, &warm).unwrap();
        if !check_feasible(&path, &model, 0.0).feasible {
            continue;
        }
        let problem = NlpProblem::new(model.clone(), scenario.cost().clone(), horizon, x0)
            .with_terminal(path.state(horizon).to_vec())
            .with_time_offset(rng.gen_range(0..20));
        let solution = Solver::default().solve(&problem, &warm).unwrap();
        if solution.status == SolveStatus::InfeasibleStart {
            return Err(format!("{}: feasible warm start rejected", scenario.name));
        }
        let rise = solution.objective - solution.warm_objective;
        worst = worst.max(rise);
        if rise > 1e-9 * solution.warm_objective.abs().max(1.0) || solution.terminal_residual > 1e-6
        {
            return Err(format!(
                "{}: objective {} against warm start {}, terminal residual {:e}",
                scenario.name,
                solution.objective,
                solution.warm_objective,
                solution.terminal_residual
            ));
        }
        checked += 1;
    }
    Ok(format!("{instances} solves, largest change {worst:.1e}"))
}
