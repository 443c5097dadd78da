//! Box-constrained minimisation of the augmented-Lagrangian merit.
//!
//! Projected Newton-type iteration: variables sitting on a bound with the
//! gradient pushing outward are frozen, the remaining block takes a
//! Newton step with the semismooth merit Hessian. A box QP on the
//! curvature-flipped model picks the active set; a Levenberg shift grows
//! until the projected trial point passes an Armijo test.

use alloc::vec;
use alloc::vec::Vec;

use super::shooting::{Multipliers, Shooting};
use crate::math;

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const STALL_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct InnerOutcome {
    pub iterations: usize,
    pub merit: f64,
    pub objective: f64,
    /// `|z - P(z - g)|_inf` at the returned point.
    pub stationarity: f64,
    pub converged: bool,
}

fn project(z: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in z.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Newton step on the variables the QP step `d_qp` leaves off the bounds,
/// holding the others at `d_qp`. Indefinite blocks get their eigenvalues
/// flipped. Returns `None` for an empty free set.
fn subspace_step(
    hess: &[f64],
    nv: usize,
    g: &[f64],
    d_qp: &[f64],
    room_lo: &[f64],
    room_hi: &[f64],
    shift: f64,
) -> Option<Vec<f64>> {
    let free: Vec<usize> = (0..nv)
        .filter(|&i| d_qp[i] > room_lo[i] && d_qp[i] < room_hi[i])
        .collect();
    let nf = free.len();
    if nf == 0 {
        return None;
    }
    let mut block = vec![0.0; nf * nf];
    let mut rhs = vec![0.0; nf];
    for (r, &i) in free.iter().enumerate() {
        let mut grad = g[i];
        for j in 0..nv {
            if !free.contains(&j) {
                grad += hess[i * nv + j] * d_qp[j];
            }
        }
        rhs[r] = -grad;
        for (c, &j) in free.iter().enumerate() {
            block[r * nf + c] = hess[i * nv + j];
        }
    }
    let largest = (0..nf)
        .fold(0.0_f64, |m, i| m.max(block[i * nf + i].abs()))
        .max(1.0);
    let mut work = block.clone();
    for i in 0..nf {
        work[i * nf + i] += shift;
    }
    if math::cholesky(&mut work, nf)
        && (0..nf).all(|i| work[i * nf + i] * work[i * nf + i] > 1e-12 * largest)
    {
        math::cholesky_solve(&work, nf, &mut rhs);
    } else {
        let (vals, vecs) = math::symmetric_eigen(&block, nf);
        let top = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
        let coeff: Vec<f64> = (0..nf)
            .map(|k| {
                let proj: f64 = (0..nf).map(|r| vecs[r * nf + k] * rhs[r]).sum();
                proj / (vals[k].abs().max(1e-10 * top) + shift)
            })
            .collect();
        for r in 0..nf {
            rhs[r] = (0..nf).map(|k| vecs[r * nf + k] * coeff[k]).sum();
        }
    }
    let mut d = d_qp.to_vec();
    for (r, &i) in free.iter().enumerate() {
        d[i] = rhs[r];
    }
    Some(d)
}

fn projected_gradient_norm(z: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    z.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((zi, gi), (l, h))| (zi - (zi - gi).clamp(*l, *h)).abs())
        .fold(0.0, f64::max)
}

pub(crate) struct ProjectedNewton {
    pub max_iterations: usize,
}

impl ProjectedNewton {
    pub fn minimize(
        &self,
        shooting: &mut Shooting<'_>,
        z: &mut Vec<f64>,
        mult: &Multipliers,
        tolerance_scale: f64,
    ) -> InnerOutcome {
        let nv = z.len();
        let (lo, hi) = shooting.bounds();
        project(z, &lo, &hi);

        let mut g = vec![0.0; nv];
        let mut g_trial = vec![0.0; nv];
        let (mut merit, mut objective, _) = shooting.merit_gradient(z, Some(mult), &mut g);
        let mut stationarity = projected_gradient_norm(z, &g, &lo, &hi);
        let mut iterations = 0;
        let mut lam = 0.0_f64;
        let mut history: Vec<f64> = Vec::new();

        while iterations < self.max_iterations {
            let tol = tolerance_scale * objective.abs().max(1.0);
            if stationarity <= tol {
                return InnerOutcome {
                    iterations,
                    merit,
                    objective,
                    stationarity,
                    converged: true,
                };
            }
            iterations += 1;

            let mut hess = vec![0.0; nv * nv];
            shooting.merit_hessian(z, mult, &mut hess);
            // Negative curvature is flipped: B = V |L| V'.
            let (vals, vecs) = math::symmetric_eigen(&hess, nv);
            let largest = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
            let floor = 1e-10 * largest;
            let mags: Vec<f64> = vals.iter().map(|v| v.abs().max(floor)).collect();
            let mut model = vec![0.0; nv * nv];
            for r in 0..nv {
                for c in r..nv {
                    let v: f64 = (0..nv)
                        .map(|k| vecs[r * nv + k] * mags[k] * vecs[c * nv + k])
                        .sum();
                    model[r * nv + c] = v;
                    model[c * nv + r] = v;
                }
            }
            let room_lo: Vec<f64> = (0..nv).map(|i| lo[i] - z[i]).collect();
            let room_hi: Vec<f64> = (0..nv).map(|i| hi[i] - z[i]).collect();

            // Levenberg search: the shift grows until the box-constrained
            // model step passes an Armijo test.
            let mut lam_try = lam;
            let mut accepted = None;
            let mut trial = z.clone();
            let mut shifted = model.clone();
            for attempt in 0..MAX_BACKTRACKS {
                shifted.copy_from_slice(&model);
                for i in 0..nv {
                    shifted[i * nv + i] += lam_try;
                }
                let d_qp = math::box_qp(&shifted, nv, &g, &room_lo, &room_hi);
                // The QP fixes the active set; the free block then takes a
                // step with its own curvature, which the full-matrix flip
                // would distort.
                let d_sub = subspace_step(&hess, nv, &g, &d_qp, &room_lo, &room_hi, lam_try);
                let mut found = None;
                for d in [d_sub.as_deref(), Some(&d_qp[..])].into_iter().flatten() {
                    for i in 0..nv {
                        trial[i] = z[i] + d[i];
                    }
                    project(&mut trial, &lo, &hi);
                    let f_trial = shooting.merit(&trial, mult);
                    let predicted: f64 = (0..nv).map(|i| g[i] * (trial[i] - z[i])).sum();
                    if f_trial.is_finite()
                        && predicted < 0.0
                        && f_trial <= merit + ARMIJO * predicted
                    {
                        found = Some(f_trial);
                        break;
                    }
                }
                if let Some(f_trial) = found {
                    accepted = Some(f_trial);
                    lam = if attempt == 0 { lam_try / 3.0 } else { lam_try };
                    if lam < 1e-12 * largest {
                        lam = 0.0;
                    }
                    break;
                }
                for i in 0..nv {
                    trial[i] = z[i] + d_qp[i];
                }
                project(&mut trial, &lo, &hi);
                let f_trial = shooting.merit(&trial, mult);
                // Near the optimum the decrease drowns in rounding; accept a
                // full step that does not raise the merit beyond that noise
                // while shrinking the projected gradient.
                if attempt == 0
                    && f_trial.is_finite()
                    && f_trial - merit <= 1e-13 * merit.abs().max(1.0)
                {
                    let (_, _, _) = shooting.merit_gradient(&trial, Some(mult), &mut g_trial);
                    if projected_gradient_norm(&trial, &g_trial, &lo, &hi) < 0.5 * stationarity {
                        accepted = Some(f_trial);
                        break;
                    }
                }
                lam_try = if lam_try == 0.0 {
                    1e-6 * largest
                } else {
                    4.0 * lam_try
                };
            }
            match accepted {
                Some(_) => {
                    z.copy_from_slice(&trial);
                    let (mv, ov, _) = shooting.merit_gradient(z, Some(mult), &mut g);
                    merit = mv;
                    objective = ov;
                    stationarity = projected_gradient_norm(z, &g, &lo, &hi);
                    // Rounding-level progress over a stretch of iterations
                    // means the tolerance is out of reach at this penalty.
                    history.push(merit);
                    if history.len() > STALL_WINDOW {
                        let old = history[history.len() - 1 - STALL_WINDOW];
                        if old - merit <= 1e-14 * merit.abs().max(1.0) {
                            break;
                        }
                    }
                }
                None => {
                    return InnerOutcome {
                        iterations,
                        merit,
                        objective,
                        stationarity,
                        converged: false,
                    };
                }
            }
        }
        InnerOutcome {
            iterations,
            merit,
            objective,
            stationarity,
            converged: stationarity <= tolerance_scale * objective.abs().max(1.0),
        }
    }
}
