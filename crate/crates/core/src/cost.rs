//! Stage costs `l(t, x, u)`.
//!
//! Costs take the absolute time index `t` so that tracking costs can follow
//! a time-varying reference while the optimiser works on a shifted window.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dim, Error, Result};

pub trait StageCost: Send + Sync {
    fn value(&self, t: usize, x: &[f64], u: &[f64]) -> f64;

    /// Overwrites `gx`, `gu` with the partial derivatives at `(x, u)`.
    fn gradient(&self, t: usize, x: &[f64], u: &[f64], gx: &mut [f64], gu: &mut [f64]);
}

impl<C: StageCost + ?Sized> StageCost for Arc<C> {
    fn value(&self, t: usize, x: &[f64], u: &[f64]) -> f64 {
        (**self).value(t, x, u)
    }

    fn gradient(&self, t: usize, x: &[f64], u: &[f64], gx: &mut [f64], gu: &mut [f64]) {
        (**self).gradient(t, x, u, gx, gu)
    }
}

/// `l == 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroCost;

impl StageCost for ZeroCost {
    fn value(&self, _t: usize, _x: &[f64], _u: &[f64]) -> f64 {
        0.0
    }

    fn gradient(&self, _t: usize, _x: &[f64], _u: &[f64], gx: &mut [f64], gu: &mut [f64]) {
        gx.iter_mut().chain(gu.iter_mut()).for_each(|g| *g = 0.0);
    }
}

/// Economic-plus-quadratic cost
/// `c^T x + d^T u + 1/2 |x - x_ref|^2_Q + 1/2 |u - u_ref|^2_R - offset`
/// with diagonal `Q`, `R`.
///
/// The plain regulator cost `|x|^2 + |u|^2` is `Q = 2 I`, `R = 2 I`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub linear_x: Vec<f64>,
    pub linear_u: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub x_ref: Vec<f64>,
    pub u_ref: Vec<f64>,
    pub offset: f64,
}

impl QuadraticCost {
    /// `|x|^2 + |u|^2`.
    pub fn regulator(n: usize, m: usize) -> Self {
        Self {
            linear_x: vec![0.0; n],
            linear_u: vec![0.0; m],
            q: vec![2.0; n],
            r: vec![2.0; m],
            x_ref: vec![0.0; n],
            u_ref: vec![0.0; m],
            offset: 0.0,
        }
    }

    /// Purely linear (economic) cost `c^T x + d^T u`.
    pub fn linear(linear_x: Vec<f64>, linear_u: Vec<f64>) -> Self {
        let (n, m) = (linear_x.len(), linear_u.len());
        Self {
            linear_x,
            linear_u,
            q: vec![0.0; n],
            r: vec![0.0; m],
            x_ref: vec![0.0; n],
            u_ref: vec![0.0; m],
            offset: 0.0,
        }
    }

    /// Adds `1/2 |x - x_ref|^2_Q + 1/2 |u - u_ref|^2_R` with diagonal weights.
    pub fn with_quadratic(
        mut self,
        q: Vec<f64>,
        r: Vec<f64>,
        x_ref: Vec<f64>,
        u_ref: Vec<f64>,
    ) -> Result<Self> {
        check_dim(self.linear_x.len(), q.len())?;
        check_dim(self.linear_x.len(), x_ref.len())?;
        check_dim(self.linear_u.len(), r.len())?;
        check_dim(self.linear_u.len(), u_ref.len())?;
        self.q = q;
        self.r = r;
        self.x_ref = x_ref;
        self.u_ref = u_ref;
        Ok(self)
    }

    /// Shifts the cost so that `l(x_s, u_s) = 0`.
    pub fn normalized(mut self, xs: &[f64], us: &[f64]) -> Self {
        self.offset = 0.0;
        self.offset = self.value(0, xs, us);
        self
    }
}

impl StageCost for QuadraticCost {
    fn value(&self, _t: usize, x: &[f64], u: &[f64]) -> f64 {
        let mut v = -self.offset;
        for i in 0..x.len() {
            let d = x[i] - self.x_ref[i];
            v += self.linear_x[i] * x[i] + 0.5 * self.q[i] * d * d;
        }
        for i in 0..u.len() {
            let d = u[i] - self.u_ref[i];
            v += self.linear_u[i] * u[i] + 0.5 * self.r[i] * d * d;
        }
        v
    }

    fn gradient(&self, _t: usize, x: &[f64], u: &[f64], gx: &mut [f64], gu: &mut [f64]) {
        for i in 0..x.len() {
            gx[i] = self.linear_x[i] + self.q[i] * (x[i] - self.x_ref[i]);
        }
        for i in 0..u.len() {
            gu[i] = self.linear_u[i] + self.r[i] * (u[i] - self.u_ref[i]);
        }
    }
}

/// Periodic sequence of target points `r(t) = points[t mod period]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSignal {
    dim: usize,
    points: Vec<f64>,
}

impl ReferenceSignal {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::InvalidConfig(format!(
                "reference storage of length {} is not a positive multiple of {dim}",
                points.len()
            )));
        }
        Ok(Self { dim, points })
    }

    pub fn from_fn<F: Fn(usize) -> Vec<f64>>(dim: usize, period: usize, f: F) -> Result<Self> {
        let mut points = Vec::with_capacity(dim * period);
        for k in 0..period {
            let p = f(k);
            check_dim(dim, p.len())?;
            points.extend_from_slice(&p);
        }
        Self::new(dim, points)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn period(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn at(&self, t: usize) -> &[f64] {
        let k = t % self.period();
        &self.points[k * self.dim..(k + 1) * self.dim]
    }
}

/// `|x[idx] - r(t)|^2` over the selected state components.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingCost {
    reference: ReferenceSignal,
    components: Vec<usize>,
}

impl TrackingCost {
    pub fn new(reference: ReferenceSignal, components: Vec<usize>) -> Result<Self> {
        check_dim(reference.dim(), components.len())?;
        Ok(Self {
            reference,
            components,
        })
    }

    pub fn reference(&self) -> &ReferenceSignal {
        &self.reference
    }

    pub fn components(&self) -> &[usize] {
        &self.components
    }
}

impl StageCost for TrackingCost {
    fn value(&self, t: usize, x: &[f64], _u: &[f64]) -> f64 {
        let r = self.reference.at(t);
        self.components
            .iter()
            .zip(r)
            .map(|(&i, ri)| (x[i] - ri) * (x[i] - ri))
            .sum()
    }

    fn gradient(&self, t: usize, x: &[f64], _u: &[f64], gx: &mut [f64], gu: &mut [f64]) {
        gx.iter_mut().chain(gu.iter_mut()).for_each(|g| *g = 0.0);
        let r = self.reference.at(t);
        for (&i, ri) in self.components.iter().zip(r) {
            gx[i] = 2.0 * (x[i] - ri);
        }
    }
}

/// Adapts closures into a [`StageCost`]; handy for tests and ad-hoc costs.
pub struct FnCost<V, G> {
    value: V,
    gradient: G,
}

impl<V, G> FnCost<V, G>
where
    V: Fn(usize, &[f64], &[f64]) -> f64 + Send + Sync,
    G: Fn(usize, &[f64], &[f64], &mut [f64], &mut [f64]) + Send + Sync,
{
    pub fn new(value: V, gradient: G) -> Self {
        Self { value, gradient }
    }
}

impl<V, G> StageCost for FnCost<V, G>
where
    V: Fn(usize, &[f64], &[f64]) -> f64 + Send + Sync,
    G: Fn(usize, &[f64], &[f64], &mut [f64], &mut [f64]) + Send + Sync,
{
    fn value(&self, t: usize, x: &[f64], u: &[f64]) -> f64 {
        (self.value)(t, x, u)
    }

    fn gradient(&self, t: usize, x: &[f64], u: &[f64], gx: &mut [f64], gu: &mut [f64]) {
        (self.gradient)(t, x, u, gx, gu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regulator_cost_values() {
        let c = QuadraticCost::regulator(2, 1);
        assert_eq!(c.value(0, &[1.0, 0.0], &[0.0]), 1.0);
        assert_eq!(c.value(3, &[1.0, 2.0], &[3.0]), 14.0);
        let (mut gx, mut gu) = ([0.0; 2], [0.0; 1]);
        c.gradient(0, &[1.0, 2.0], &[3.0], &mut gx, &mut gu);
        assert_eq!(gx, [2.0, 4.0]);
        assert_eq!(gu, [6.0]);
    }

    #[test]
    fn normalization_zeroes_steady_state() {
        let xs = [0.3874, 1.5811, 0.3752, 0.2373];
        let us = [1.0, 2.431];
        let c = QuadraticCost::linear(vec![0.0, 0.0, -1.0, 0.0], vec![0.0, 0.0])
            .with_quadratic(vec![0.36; 4], vec![0.002; 2], xs.to_vec(), us.to_vec())
            .unwrap()
            .normalized(&xs, &us);
        assert!(c.value(0, &xs, &us).abs() < 1e-12);
    }

    #[test]
    fn reference_is_periodic() {
        let r = ReferenceSignal::from_fn(1, 4, |k| vec![k as f64]).unwrap();
        assert_eq!(r.at(1), r.at(5));
        assert_eq!(r.at(7), &[3.0]);
    }
}
