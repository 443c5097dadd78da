//! Small dense numerics used across the crate.
//!
//! Everything here works on row-major `f64` slices so the core stays free of
//! a linear-algebra dependency and usable without `std`.

use alloc::vec;
use alloc::vec::Vec;

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn atan2(y: f64, x: f64) -> f64 {
    libm::atan2(y, x)
}

pub const PI: f64 = core::f64::consts::PI;

/// Wraps an angle difference into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    atan2(sin(a), cos(a))
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn dist_inf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `y += A^T x` for a row-major `rows x cols` matrix `A`.
pub fn add_mat_t_vec(a: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    for r in 0..rows {
        let xr = x[r];
        if xr == 0.0 {
            continue;
        }
        let row = &a[r * cols..(r + 1) * cols];
        for (yc, arc) in y.iter_mut().zip(row) {
            *yc += arc * xr;
        }
    }
}

/// `y = A x` for a row-major `rows x cols` matrix `A`.
pub fn mat_vec(a: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    for r in 0..rows {
        y[r] = dot(&a[r * cols..(r + 1) * cols], x);
    }
}

/// Neumaier-compensated running sum, one accumulator per component.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatedSum {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl CompensatedSum {
    pub fn zeros(dim: usize) -> Self {
        Self {
            sum: vec![0.0; dim],
            comp: vec![0.0; dim],
        }
    }

    pub fn add(&mut self, v: &[f64]) {
        for ((s, c), &x) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(v) {
            let t = *s + x;
            if s.abs() >= x.abs() {
                *c += (*s - t) + x;
            } else {
                *c += (x - t) + *s;
            }
            *s = t;
        }
    }

    pub fn sub(&mut self, v: &[f64]) {
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        self.add(&neg);
    }

    pub fn value(&self) -> Vec<f64> {
        self.sum
            .iter()
            .zip(&self.comp)
            .map(|(s, c)| s + c)
            .collect()
    }
}

/// Compensated scalar sum of an iterator.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = CompensatedSum::zeros(1);
    for v in values {
        acc.add(&[v]);
    }
    acc.value()[0]
}

/// In-place Cholesky factorisation of a symmetric row-major `n x n` matrix.
/// On success the lower triangle holds `L` with `A = L L^T`.
pub fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = sqrt(d);
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves `L L^T x = b` in place given the factor from [`cholesky`].
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves the symmetric positive semidefinite system `(A + shift I) x = b`,
/// raising `shift` until the factorisation succeeds. Returns the shift used.
pub fn solve_regularized(a: &[f64], n: usize, b: &mut [f64]) -> f64 {
    let scale = (0..n)
        .fold(0.0_f64, |m, i| m.max(a[i * n + i].abs()))
        .max(1.0);
    let mut shift = 0.0;
    let mut work = vec![0.0; n * n];
    loop {
        work.copy_from_slice(a);
        for i in 0..n {
            work[i * n + i] += shift;
        }
        if cholesky(&mut work, n) {
            cholesky_solve(&work, n, b);
            return shift;
        }
        shift = if shift == 0.0 {
            scale * 1e-12
        } else {
            shift * 10.0
        };
    }
}

/// Eigen-decomposition of a symmetric row-major `n x n` matrix by cyclic
/// Jacobi rotations. Returns the eigenvalues and the eigenvectors as the
/// columns of a row-major matrix.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..n {
            diag += m[i * n + i] * m[i * n + i];
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off <= 1e-24 * diag || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

/// Minimises `0.5 d'Bd + g'd` over the box `lo <= d <= hi` for a symmetric
/// positive definite `B` (row-major `n x n`) with a primal active-set method.
/// The box must contain the origin, which is the starting point.
pub fn box_qp(b: &[f64], n: usize, g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let mut d = vec![0.0; n];
    // 0 free, -1 held at lower, 1 held at upper
    let mut held: Vec<i8> = (0..n)
        .map(|i| {
            if lo[i] >= 0.0 && g[i] > 0.0 {
                -1
            } else if hi[i] <= 0.0 && g[i] < 0.0 {
                1
            } else {
                0
            }
        })
        .collect();
    let mut work = Vec::new();
    let mut rhs = Vec::new();
    for _ in 0..(10 * n + 10) {
        let free: Vec<usize> = (0..n).filter(|&i| held[i] == 0).collect();
        let nf = free.len();
        // Newton step on the free block from the current point.
        work.clear();
        rhs.clear();
        for &r in &free {
            let grad = g[r] + (0..n).map(|c| b[r * n + c] * d[c]).sum::<f64>();
            rhs.push(-grad);
            for &c in &free {
                work.push(b[r * n + c]);
            }
        }
        if nf > 0 && !cholesky(&mut work, nf) {
            break;
        }
        if nf > 0 {
            cholesky_solve(&work, nf, &mut rhs);
        }
        let step_size = rhs.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let scale = d.iter().fold(1e-300_f64, |m, v| m.max(v.abs()));
        if step_size <= 1e-14 * scale || nf == 0 {
            // At the subspace minimiser: release the worst held variable.
            let mut worst = None;
            let mut worst_val = 0.0;
            for i in 0..n {
                if held[i] == 0 {
                    continue;
                }
                let grad = g[i] + (0..n).map(|c| b[i * n + c] * d[c]).sum::<f64>();
                // Multiplier sign: at lower the gradient must be >= 0.
                let wrong = if held[i] < 0 { -grad } else { grad };
                if wrong > worst_val {
                    worst_val = wrong;
                    worst = Some(i);
                }
            }
            match worst {
                Some(i) => held[i] = 0,
                None => break,
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for (k, &i) in free.iter().enumerate() {
            let p = rhs[k];
            let room = if p > 0.0 {
                (hi[i] - d[i]) / p
            } else if p < 0.0 {
                (lo[i] - d[i]) / p
            } else {
                f64::INFINITY
            };
            if room < alpha {
                alpha = room.max(0.0);
                blocking = Some((i, p > 0.0));
            }
        }
        for (k, &i) in free.iter().enumerate() {
            d[i] = (d[i] + alpha * rhs[k]).clamp(lo[i], hi[i]);
        }
        match blocking {
            Some((i, upper)) => {
                d[i] = if upper { hi[i] } else { lo[i] };
                held[i] = if upper { 1 } else { -1 };
            }
            None => {}
        }
    }
    d
}

/// Least-squares solve of `min ||M x - y||` through the normal equations
/// (row-major `rows x cols` design matrix). Used for small fits only.
pub fn least_squares(m: &[f64], rows: usize, cols: usize, y: &[f64]) -> Vec<f64> {
    let mut ata = vec![0.0; cols * cols];
    let mut aty = vec![0.0; cols];
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        for i in 0..cols {
            aty[i] += row[i] * y[r];
            for j in 0..cols {
                ata[i * cols + j] += row[i] * row[j];
            }
        }
    }
    solve_regularized(&ata, cols, &mut aty);
    aty
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_eigen_reconstructs_matrix() {
        let a = [2.0, -1.0, 0.5, -1.0, -3.0, 0.2, 0.5, 0.2, 1.0];
        let (vals, v) = symmetric_eigen(&a, 3);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| v[i * 3 + k] * vals[k] * v[j * 3 + k]).sum();
                assert!((r - a[i * 3 + j]).abs() < 1e-12);
            }
        }
        assert!(vals.iter().any(|l| *l < 0.0));
    }

    #[test]
    fn box_qp_matches_grid_search() {
        let b = [2.0, 0.9, 0.9, 1.0];
        let g = [-3.0, 1.0];
        let (lo, hi) = ([-0.5, -0.2], [1.0, 0.7]);
        let d = box_qp(&b, 2, &g, &lo, &hi);
        let q = |x: f64, y: f64| 0.5 * (2.0 * x * x + 1.8 * x * y + y * y) - 3.0 * x + y;
        let mut best = f64::INFINITY;
        for i in 0..=300 {
            for j in 0..=180 {
                let x = -0.5 + 1.5 * i as f64 / 300.0;
                let y = -0.2 + 0.9 * j as f64 / 180.0;
                best = best.min(q(x, y));
            }
        }
        assert!(q(d[0], d[1]) <= best + 1e-12);
        assert!((d[0] - 1.0).abs() < 1e-15 && (d[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = [4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let mut b = [1.0, 2.0, 3.0];
        let shift = solve_regularized(&a, 3, &mut b);
        assert_eq!(shift, 0.0);
        let mut r = [0.0; 3];
        mat_vec(&a, 3, 3, &b, &mut r);
        assert!(dist_inf(&r, &[1.0, 2.0, 3.0]) < 1e-14);
    }

    #[test]
    fn singular_system_gets_shifted() {
        let a = [1.0, 1.0, 1.0, 1.0];
        let mut b = [1.0, 1.0];
        let shift = solve_regularized(&a, 2, &mut b);
        assert!(shift > 0.0);
        assert!(b.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut acc = CompensatedSum::zeros(1);
        let mut naive = 0.0;
        for _ in 0..10_000 {
            acc.add(&[0.1]);
            naive += 0.1;
        }
        assert!((acc.value()[0] - 1000.0).abs() < 1e-12);
        assert!((naive - 1000.0_f64).abs() > 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(2.0 * PI + 0.1) - 0.1).abs() < 1e-12);
        assert!((wrap_angle(-0.1) + 0.1).abs() < 1e-15);
    }
}
