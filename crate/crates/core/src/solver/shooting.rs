//! Single-shooting evaluation of the augmented-Lagrangian merit and its
//! gradient by a backward (adjoint) sweep through the rollout.

use alloc::vec;
use alloc::vec::Vec;

use super::{InitialCondition, NlpProblem, TerminalConstraint};
use crate::math;

/// Multipliers and penalty of the augmented Lagrangian.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Multipliers {
    pub rho: f64,
    /// One entry per predicted state component `x_1..x_N`.
    pub state: Vec<f64>,
    pub terminal: Vec<f64>,
    pub summed: Vec<f64>,
}

impl Multipliers {
    pub fn zeros(problem: &NlpProblem, rho: f64) -> Self {
        let n = problem.model.n();
        let terminal = match problem.terminal {
            TerminalConstraint::Free => 0,
            _ => n,
        };
        let summed = problem
            .summed_output
            .as_ref()
            .map_or(0, |s| s.map.output_dim());
        Self {
            rho,
            state: vec![0.0; problem.horizon * n],
            terminal: vec![0.0; terminal],
            summed: vec![0.0; summed],
        }
    }
}

/// Constraint values at one point, grouped by block.
#[derive(Debug, Clone, Default)]
pub(crate) struct Constraints {
    /// Predicted states `x_1..x_N` (checked against the state box).
    pub states: Vec<f64>,
    pub terminal: Vec<f64>,
    pub summed: Vec<f64>,
}

/// Worst violations per block.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Residuals {
    pub state_box: f64,
    pub terminal: f64,
    pub summed: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.state_box.max(self.terminal).max(self.summed)
    }
}

#[inline]
fn phr(c: f64, lo: f64, hi: f64, mu: f64, rho: f64) -> (f64, f64) {
    // Minimises mu (c - s) + rho/2 (c - s)^2 over the slack s in [lo, hi];
    // returns the value and its derivative in c.
    let s = (c + mu / rho).clamp(lo, hi);
    let d = c - s;
    (mu * d + 0.5 * rho * d * d, mu + rho * d)
}

#[inline]
fn violation(c: f64, lo: f64, hi: f64) -> f64 {
    (lo - c).max(c - hi).max(0.0)
}

/// Reusable buffers for evaluating one problem.
pub(crate) struct Shooting<'a> {
    pub problem: &'a NlpProblem,
    n: usize,
    m: usize,
    horizon: usize,
    free_initial: bool,
    pub x0: Vec<f64>,
    pub states: Vec<f64>,
    jx: Vec<f64>,
    ju: Vec<f64>,
    gx: Vec<f64>,
    gu: Vec<f64>,
    hx: Vec<f64>,
    hu: Vec<f64>,
    h: Vec<f64>,
    dx: Vec<f64>,
    du: Vec<f64>,
    lambda: Vec<f64>,
    tmp: Vec<f64>,
    pub evaluations: usize,
}

impl<'a> Shooting<'a> {
    pub fn new(problem: &'a NlpProblem) -> Self {
        let n = problem.model.n();
        let m = problem.model.m();
        let horizon = problem.horizon;
        let p = problem
            .summed_output
            .as_ref()
            .map_or(0, |s| s.map.output_dim());
        let (free_initial, x0) = match &problem.initial {
            InitialCondition::Fixed(x) => (false, x.clone()),
            InitialCondition::Free { guess } => (true, guess.clone()),
        };
        Self {
            problem,
            n,
            m,
            horizon,
            free_initial,
            x0,
            states: vec![0.0; (horizon + 1) * n],
            jx: vec![0.0; horizon * n * n],
            ju: vec![0.0; horizon * n * m],
            gx: vec![0.0; n],
            gu: vec![0.0; m],
            hx: vec![0.0; p * n],
            hu: vec![0.0; p * m],
            h: vec![0.0; p],
            dx: vec![0.0; (horizon + 1) * n],
            du: vec![0.0; horizon * m],
            lambda: vec![0.0; n],
            tmp: vec![0.0; n],
            evaluations: 0,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.horizon * self.m + if self.free_initial { self.n } else { 0 }
    }

    /// Splits a decision vector into `(initial state, controls)`.
    pub fn split<'z>(&'z self, z: &'z [f64]) -> (&'z [f64], &'z [f64]) {
        if self.free_initial {
            (&z[..self.n], &z[self.n..])
        } else {
            (&self.x0, z)
        }
    }

    pub fn pack(&self, controls: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.num_vars());
        if self.free_initial {
            z.extend_from_slice(&self.x0);
        }
        z.extend_from_slice(controls);
        z
    }

    /// Box bounds on the decision vector.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let model = &self.problem.model;
        let mut lo = Vec::with_capacity(self.num_vars());
        let mut hi = Vec::with_capacity(self.num_vars());
        if self.free_initial {
            lo.extend_from_slice(model.state_box().lower());
            hi.extend_from_slice(model.state_box().upper());
        }
        for _ in 0..self.horizon {
            lo.extend_from_slice(model.control_box().lower());
            hi.extend_from_slice(model.control_box().upper());
        }
        (lo, hi)
    }

    fn simulate(&mut self, z: &[f64], with_jacobians: bool) {
        let (n, m) = (self.n, self.m);
        let dynamics = self.problem.model.dynamics();
        let x0: Vec<f64> = if self.free_initial {
            z[..n].to_vec()
        } else {
            self.x0.clone()
        };
        let controls = if self.free_initial { &z[n..] } else { z };
        self.states[..n].copy_from_slice(&x0);
        for i in 0..self.horizon {
            let (head, tail) = self.states.split_at_mut((i + 1) * n);
            let x = &head[i * n..];
            let u = &controls[i * m..(i + 1) * m];
            let next = &mut tail[..n];
            if with_jacobians {
                dynamics.step_jacobian(
                    x,
                    u,
                    next,
                    &mut self.jx[i * n * n..(i + 1) * n * n],
                    &mut self.ju[i * n * m..(i + 1) * n * m],
                );
            } else {
                dynamics.step(x, u, next);
            }
        }
    }

    fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.n..(i + 1) * self.n]
    }

    /// Constraint values at the last simulated point.
    fn constraints(&mut self, controls: &[f64]) -> Constraints {
        let n = self.n;
        let m = self.m;
        let problem = self.problem;
        let mut out = Constraints {
            states: self.states[n..].to_vec(),
            ..Default::default()
        };
        let last = self.state(self.horizon).to_vec();
        match &problem.terminal {
            TerminalConstraint::Free => {}
            TerminalConstraint::Fixed(target) => {
                out.terminal = vec![0.0; n];
                problem.model.state_diff(&last, target, &mut out.terminal);
            }
            TerminalConstraint::Periodic => {
                out.terminal = vec![0.0; n];
                let first = self.state(0).to_vec();
                problem.model.state_diff(&last, &first, &mut out.terminal);
            }
        }
        if let Some(sum) = &problem.summed_output {
            let p = sum.map.output_dim();
            let mut acc = vec![0.0; p];
            for i in 0..self.horizon {
                sum.map.eval(
                    &self.states[i * n..(i + 1) * n],
                    &controls[i * m..(i + 1) * m],
                    &mut self.h,
                );
                for (a, v) in acc.iter_mut().zip(&self.h) {
                    *a += v;
                }
            }
            for (a, d) in acc.iter_mut().zip(&sum.offset) {
                *a -= d;
            }
            out.summed = acc;
        }
        out
    }

    pub fn residuals(&self, c: &Constraints) -> Residuals {
        let model = &self.problem.model;
        let (lo, hi) = (model.state_box().lower(), model.state_box().upper());
        let n = self.n;
        let state_box = c
            .states
            .iter()
            .enumerate()
            .map(|(idx, v)| violation(*v, lo[idx % n], hi[idx % n]))
            .fold(0.0, f64::max);
        let terminal = math::norm_inf(&c.terminal);
        let summed = match &self.problem.summed_output {
            Some(s) => c
                .summed
                .iter()
                .enumerate()
                .map(|(i, v)| violation(*v, s.base.lower()[i], s.base.upper()[i]))
                .fold(0.0, f64::max),
            None => 0.0,
        };
        Residuals {
            state_box,
            terminal,
            summed,
        }
    }

    /// Objective `sum l(t0 + i, x_i, u_i)` and constraint values at `z`.
    pub fn point(&mut self, z: &[f64]) -> (f64, Constraints) {
        self.evaluations += 1;
        self.simulate(z, false);
        let controls: Vec<f64> = self.split(z).1.to_vec();
        let objective = self.objective_only(&controls);
        let c = self.constraints(&controls);
        (objective, c)
    }

    fn objective_only(&self, controls: &[f64]) -> f64 {
        let cost = &self.problem.cost;
        let t0 = self.problem.time_offset;
        let m = self.m;
        (0..self.horizon)
            .map(|i| cost.value(t0 + i, self.state(i), &controls[i * m..(i + 1) * m]))
            .sum()
    }

    /// Merit value of the constraint blocks given multipliers; also returns
    /// the derivative of the merit with respect to each constraint value.
    fn penalty(&self, c: &Constraints, mult: &Multipliers, weights: &mut Constraints) -> f64 {
        let rho = mult.rho;
        let model = &self.problem.model;
        let (lo, hi) = (model.state_box().lower(), model.state_box().upper());
        let n = self.n;
        let mut total = 0.0;
        weights.states.clear();
        weights.states.resize(c.states.len(), 0.0);
        for (idx, v) in c.states.iter().enumerate() {
            let (l, h) = (lo[idx % n], hi[idx % n]);
            if l == f64::NEG_INFINITY && h == f64::INFINITY {
                continue;
            }
            let (val, w) = phr(*v, l, h, mult.state[idx], rho);
            total += val;
            weights.states[idx] = w;
        }
        weights.terminal.clear();
        for (v, mu) in c.terminal.iter().zip(&mult.terminal) {
            let (val, w) = phr(*v, 0.0, 0.0, *mu, rho);
            total += val;
            weights.terminal.push(w);
        }
        weights.summed.clear();
        if let Some(s) = &self.problem.summed_output {
            for (i, (v, mu)) in c.summed.iter().zip(&mult.summed).enumerate() {
                let (val, w) = phr(*v, s.base.lower()[i], s.base.upper()[i], *mu, rho);
                total += val;
                weights.summed.push(w);
            }
        }
        total
    }

    /// Multiplier update `mu <- mu + rho (c - s)` at constraint values `c`.
    pub fn update_multipliers(&self, c: &Constraints, mult: &mut Multipliers) {
        let mut w = Constraints::default();
        self.penalty(c, mult, &mut w);
        let model = &self.problem.model;
        let n = self.n;
        for (idx, mu) in mult.state.iter_mut().enumerate() {
            let (l, h) = (
                model.state_box().lower()[idx % n],
                model.state_box().upper()[idx % n],
            );
            if l == f64::NEG_INFINITY && h == f64::INFINITY {
                continue;
            }
            *mu = w.states[idx];
        }
        mult.terminal.copy_from_slice(&w.terminal);
        mult.summed.copy_from_slice(&w.summed);
    }

    /// Merit value and gradient. With `mult == None` this is the plain
    /// objective and its gradient.
    pub fn merit_gradient(
        &mut self,
        z: &[f64],
        mult: Option<&Multipliers>,
        grad: &mut [f64],
    ) -> (f64, f64, Constraints) {
        self.evaluations += 1;
        self.simulate(z, true);
        let controls: Vec<f64> = self.split(z).1.to_vec();
        let objective = self.seed_objective(&controls);
        let c = self.constraints(&controls);
        let mut merit = objective;
        if let Some(mult) = mult {
            let mut w = Constraints::default();
            merit += self.penalty(&c, mult, &mut w);
            self.seed_constraints(&controls, &w);
        }
        self.backward(grad);
        (merit, objective, c)
    }

    /// Gradient of `sum_i w_i c_i(z)` (plus the objective when asked); the
    /// weights follow the layout of [`Constraints`], empty blocks count as 0.
    pub fn weighted_gradient(
        &mut self,
        z: &[f64],
        w: &Constraints,
        with_objective: bool,
        grad: &mut [f64],
    ) {
        self.evaluations += 1;
        self.simulate(z, true);
        let controls: Vec<f64> = self.split(z).1.to_vec();
        if with_objective {
            self.seed_objective(&controls);
        } else {
            self.dx.iter_mut().for_each(|v| *v = 0.0);
            self.du.iter_mut().for_each(|v| *v = 0.0);
        }
        self.seed_constraints(&controls, w);
        self.backward(grad);
    }

    /// Resets the adjoint seeds to the stage-cost gradients; returns the
    /// objective at the simulated point.
    fn seed_objective(&mut self, controls: &[f64]) -> f64 {
        let (n, m) = (self.n, self.m);
        let problem = self.problem;
        let t0 = problem.time_offset;
        self.dx.iter_mut().for_each(|v| *v = 0.0);
        let mut objective = 0.0;
        for i in 0..self.horizon {
            let u = &controls[i * m..(i + 1) * m];
            let x = &self.states[i * n..(i + 1) * n];
            objective += problem.cost.value(t0 + i, x, u);
            problem
                .cost
                .gradient(t0 + i, x, u, &mut self.gx, &mut self.gu);
            for (d, g) in self.dx[i * n..(i + 1) * n].iter_mut().zip(&self.gx) {
                *d += g;
            }
            self.du[i * m..(i + 1) * m].copy_from_slice(&self.gu);
        }
        objective
    }

    /// Adds `sum_i w_i dc_i/d(x, u)` to the adjoint seeds.
    fn seed_constraints(&mut self, controls: &[f64], w: &Constraints) {
        let (n, m, horizon) = (self.n, self.m, self.horizon);
        let problem = self.problem;
        for (d, wi) in self.dx[n..].iter_mut().zip(&w.states) {
            *d += wi;
        }
        if !w.terminal.is_empty() {
            for (d, wi) in self.dx[horizon * n..].iter_mut().zip(&w.terminal) {
                *d += wi;
            }
            if matches!(problem.terminal, TerminalConstraint::Periodic) {
                for (d, wi) in self.dx[..n].iter_mut().zip(&w.terminal) {
                    *d -= wi;
                }
            }
        }
        if let Some(sum) = &problem.summed_output {
            let p = sum.map.output_dim();
            if w.summed.iter().any(|v| *v != 0.0) {
                for i in 0..horizon {
                    sum.map.jacobian(
                        &self.states[i * n..(i + 1) * n],
                        &controls[i * m..(i + 1) * m],
                        &mut self.hx,
                        &mut self.hu,
                    );
                    math::add_mat_t_vec(
                        &self.hx,
                        p,
                        n,
                        &w.summed,
                        &mut self.dx[i * n..(i + 1) * n],
                    );
                    math::add_mat_t_vec(
                        &self.hu,
                        p,
                        m,
                        &w.summed,
                        &mut self.du[i * m..(i + 1) * m],
                    );
                }
            }
        }
    }

    /// Backward sweep: lambda_N = dPhi/dx_N, lambda_i = dPhi/dx_i + A_i^T lambda_{i+1}.
    fn backward(&mut self, grad: &mut [f64]) {
        let (n, m, horizon) = (self.n, self.m, self.horizon);
        self.lambda.copy_from_slice(&self.dx[horizon * n..]);
        let offset = if self.free_initial { n } else { 0 };
        for i in (0..horizon).rev() {
            let gu = &mut grad[offset + i * m..offset + (i + 1) * m];
            gu.copy_from_slice(&self.du[i * m..(i + 1) * m]);
            math::add_mat_t_vec(&self.ju[i * n * m..(i + 1) * n * m], n, m, &self.lambda, gu);
            self.tmp.copy_from_slice(&self.dx[i * n..(i + 1) * n]);
            math::add_mat_t_vec(
                &self.jx[i * n * n..(i + 1) * n * n],
                n,
                n,
                &self.lambda,
                &mut self.tmp,
            );
            self.lambda.copy_from_slice(&self.tmp);
        }
        if self.free_initial {
            grad[..n].copy_from_slice(&self.lambda);
        }
    }

    /// First-order multiplier estimate at `z`: least-squares fit of
    /// `grad f + sum mu_i grad c_i = 0` on the variables off their bounds,
    /// over the equalities and the inequalities active at `z`. Signs of
    /// inequality multipliers are clipped to the side they sit on.
    pub fn estimate_multipliers(&mut self, z: &[f64], c: &Constraints, rho: f64) -> Multipliers {
        const ACTIVE: f64 = 1e-8;
        let mut mult = Multipliers::zeros(self.problem, rho);
        let nv = z.len();
        let (lo, hi) = self.bounds();
        let free: Vec<usize> = (0..nv)
            .filter(|&i| z[i] > lo[i] + ACTIVE && z[i] < hi[i] - ACTIVE)
            .collect();
        if free.is_empty() {
            return mult;
        }
        // (block, index, side) with side -1 lower, 0 equality, 1 upper
        let mut rows: Vec<(u8, usize, i8)> = Vec::new();
        for i in 0..c.terminal.len() {
            rows.push((1, i, 0));
        }
        let model = &self.problem.model;
        let n = self.n;
        for (idx, v) in c.states.iter().enumerate() {
            let (l, h) = (
                model.state_box().lower()[idx % n],
                model.state_box().upper()[idx % n],
            );
            if *v <= l + ACTIVE {
                rows.push((0, idx, -1));
            } else if *v >= h - ACTIVE {
                rows.push((0, idx, 1));
            }
        }
        if let Some(sum) = &self.problem.summed_output {
            for (i, v) in c.summed.iter().enumerate() {
                if *v <= sum.base.lower()[i] + ACTIVE {
                    rows.push((2, i, -1));
                } else if *v >= sum.base.upper()[i] - ACTIVE {
                    rows.push((2, i, 1));
                }
            }
        }
        if rows.is_empty() {
            return mult;
        }
        let k = rows.len();
        let nf = free.len();
        let mut design = vec![0.0; nf * k];
        let mut grad = vec![0.0; nv];
        let empty = Constraints {
            states: vec![0.0; c.states.len()],
            terminal: vec![0.0; c.terminal.len()],
            summed: vec![0.0; c.summed.len()],
        };
        for (col, &(block, idx, _)) in rows.iter().enumerate() {
            let mut w = empty.clone();
            match block {
                0 => w.states[idx] = 1.0,
                1 => w.terminal[idx] = 1.0,
                _ => w.summed[idx] = 1.0,
            }
            self.weighted_gradient(z, &w, false, &mut grad);
            for (r, &i) in free.iter().enumerate() {
                design[r * k + col] = grad[i];
            }
        }
        self.weighted_gradient(z, &empty, true, &mut grad);
        let target: Vec<f64> = free.iter().map(|&i| -grad[i]).collect();
        let fit = math::least_squares(&design, nf, k, &target);
        for (&(block, idx, side), v) in rows.iter().zip(fit) {
            let v = match side {
                -1 => v.min(0.0),
                1 => v.max(0.0),
                _ => v,
            };
            if !v.is_finite() {
                continue;
            }
            match block {
                0 => mult.state[idx] = v,
                1 => mult.terminal[idx] = v,
                _ => mult.summed[idx] = v,
            }
        }
        mult
    }

    /// Semismooth Hessian of the merit at `z`: central differences of the
    /// Lagrangian gradient with the current constraint weights frozen, plus
    /// `rho grad c grad c'` for each constraint on its quadratic branch.
    /// Differencing the merit gradient itself would smear the kink where a
    /// branch switches.
    pub fn merit_hessian(&mut self, z: &[f64], mult: &Multipliers, hess: &mut [f64]) {
        let nv = z.len();
        let (_, c) = self.point(z);
        let mut w = Constraints::default();
        self.penalty(&c, mult, &mut w);
        let mut gp = vec![0.0; nv];
        let mut gm = vec![0.0; nv];
        let mut probe = z.to_vec();
        for j in 0..nv {
            let h = 1e-7 * z[j].abs().max(1.0);
            probe[j] = z[j] + h;
            self.weighted_gradient(&probe, &w, true, &mut gp);
            probe[j] = z[j] - h;
            self.weighted_gradient(&probe, &w, true, &mut gm);
            probe[j] = z[j];
            for i in 0..nv {
                hess[i * nv + j] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        for r in 0..nv {
            for col in (r + 1)..nv {
                let avg = 0.5 * (hess[r * nv + col] + hess[col * nv + r]);
                hess[r * nv + col] = avg;
                hess[col * nv + r] = avg;
            }
        }

        let rho = mult.rho;
        let on_branch = |v: f64, lo: f64, hi: f64, mu: f64| {
            let shifted = v + mu / rho;
            shifted <= lo || shifted >= hi
        };
        let model = &self.problem.model;
        let n = self.n;
        let mut rows: Vec<(u8, usize)> = Vec::new();
        for (idx, v) in c.states.iter().enumerate() {
            let (l, h) = (
                model.state_box().lower()[idx % n],
                model.state_box().upper()[idx % n],
            );
            if (l > f64::NEG_INFINITY || h < f64::INFINITY) && on_branch(*v, l, h, mult.state[idx])
            {
                rows.push((0, idx));
            }
        }
        rows.extend((0..c.terminal.len()).map(|i| (1, i)));
        if let Some(sum) = &self.problem.summed_output {
            for (i, v) in c.summed.iter().enumerate() {
                if on_branch(*v, sum.base.lower()[i], sum.base.upper()[i], mult.summed[i]) {
                    rows.push((2, i));
                }
            }
        }
        let mut unit = Constraints {
            states: vec![0.0; c.states.len()],
            terminal: vec![0.0; c.terminal.len()],
            summed: vec![0.0; c.summed.len()],
        };
        for (block, idx) in rows {
            let slot = match block {
                0 => &mut unit.states[idx],
                1 => &mut unit.terminal[idx],
                _ => &mut unit.summed[idx],
            };
            *slot = 1.0;
            self.weighted_gradient(z, &unit, false, &mut gp);
            match block {
                0 => unit.states[idx] = 0.0,
                1 => unit.terminal[idx] = 0.0,
                _ => unit.summed[idx] = 0.0,
            }
            for r in 0..nv {
                if gp[r] == 0.0 {
                    continue;
                }
                for col in 0..nv {
                    hess[r * nv + col] += rho * gp[r] * gp[col];
                }
            }
        }
    }

    /// Merit value only.
    pub fn merit(&mut self, z: &[f64], mult: &Multipliers) -> f64 {
        let (objective, c) = self.point(z);
        let mut w = Constraints::default();
        objective + self.penalty(&c, mult, &mut w)
    }

    pub fn predicted_states(&self) -> &[f64] {
        &self.states
    }
}
