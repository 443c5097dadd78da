//! Asymptotic-average output constraints.
//!
//! The time-varying constraint set `Y_{j,k}` is a fixed base box `Y0`
//! translated by an offset `d_{j,k}`. Every set operation in the recursion
//! adds or removes a single point, so the whole recursion reduces to offset
//! arithmetic on `d`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::dynamics::{BoxSet, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::math::CompensatedSum;
use crate::solver::{NlpProblem, SummedOutputConstraint};

/// Output map `y = h(x, u)` with its Jacobians.
pub trait OutputMap: Send + Sync {
    fn output_dim(&self) -> usize;

    fn eval(&self, x: &[f64], u: &[f64], y: &mut [f64]);

    /// Row-major `p x n` and `p x m` Jacobians.
    fn jacobian(&self, x: &[f64], u: &[f64], hx: &mut [f64], hu: &mut [f64]);
}

/// `h(x, u) = u[index]`: a single control component as output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlComponent {
    pub index: usize,
}

impl OutputMap for ControlComponent {
    fn output_dim(&self) -> usize {
        1
    }

    fn eval(&self, _x: &[f64], u: &[f64], y: &mut [f64]) {
        y[0] = u[self.index];
    }

    fn jacobian(&self, _x: &[f64], _u: &[f64], hx: &mut [f64], hu: &mut [f64]) {
        hx.iter_mut().for_each(|v| *v = 0.0);
        hu.iter_mut().for_each(|v| *v = 0.0);
        hu[self.index] = 1.0;
    }
}

/// `h(x, u) = x[index]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateComponent {
    pub index: usize,
}

impl OutputMap for StateComponent {
    fn output_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &[f64], _u: &[f64], y: &mut [f64]) {
        y[0] = x[self.index];
    }

    fn jacobian(&self, _x: &[f64], _u: &[f64], hx: &mut [f64], hu: &mut [f64]) {
        hx.iter_mut().for_each(|v| *v = 0.0);
        hu.iter_mut().for_each(|v| *v = 0.0);
        hx[self.index] = 1.0;
    }
}

/// Output map, target average set `Y` and base set `Y0`.
#[derive(Clone)]
pub struct AverageConstraintSpec {
    pub map: Arc<dyn OutputMap>,
    pub target: BoxSet,
    pub base: BoxSet,
}

impl core::fmt::Debug for AverageConstraintSpec {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("AverageConstraintSpec")
            .field("target", &self.target)
            .field("base", &self.base)
            .finish()
    }
}

impl AverageConstraintSpec {
    /// Validates dimensions, compactness and `0 in Y0`.
    pub fn new(map: Arc<dyn OutputMap>, target: BoxSet, base: BoxSet) -> Result<Self> {
        let p = map.output_dim();
        check_dim(p, target.dim())?;
        check_dim(p, base.dim())?;
        if !target.is_bounded() {
            return Err(Error::InvalidConfig(
                "target average set must be bounded".into(),
            ));
        }
        if !base.contains(&vec![0.0; p], 0.0) {
            return Err(Error::InvalidConfig(
                "base set must contain the origin".into(),
            ));
        }
        Ok(Self { map, target, base })
    }

    /// Default base set `[-N w, N w]` with `w` the half-width of `Y`.
    pub fn with_default_base(
        map: Arc<dyn OutputMap>,
        target: BoxSet,
        horizon: usize,
    ) -> Result<Self> {
        let base = default_base(&target, horizon);
        Self::new(map, target, base)
    }

    pub fn output_dim(&self) -> usize {
        self.map.output_dim()
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.output_dim()];
        self.map.eval(x, u, &mut y);
        y
    }
}

pub fn default_base(target: &BoxSet, horizon: usize) -> BoxSet {
    let radius: Vec<f64> = target
        .half_widths()
        .iter()
        .map(|w| horizon as f64 * w)
        .collect();
    let lower = radius.iter().map(|r| -r).collect();
    BoxSet::new(lower, radius).expect("symmetric box is valid")
}

/// `Y_{j,k} = Y0 + d`, with `d` accumulated by compensated summation.
#[derive(Debug, Clone)]
pub struct OffsetSet {
    base: BoxSet,
    offset: CompensatedSum,
}

impl OffsetSet {
    pub fn new(base: BoxSet, offset: &[f64]) -> Result<Self> {
        check_dim(base.dim(), offset.len())?;
        let mut acc = CompensatedSum::zeros(offset.len());
        acc.add(offset);
        Ok(Self { base, offset: acc })
    }

    pub fn base(&self) -> &BoxSet {
        &self.base
    }

    pub fn offset(&self) -> Vec<f64> {
        self.offset.value()
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        self.violation(v) <= tol
    }

    /// Worst violation of `v - d in Y0`.
    pub fn violation(&self, v: &[f64]) -> f64 {
        let shifted: Vec<f64> = v.iter().zip(self.offset()).map(|(a, b)| a - b).collect();
        self.base.max_violation(&shifted)
    }

    /// `Y_{k+1} = Y_k - h_applied + h_incoming`.
    pub fn update(&mut self, h_applied: &[f64], h_incoming: &[f64]) {
        self.offset.sub(h_applied);
        self.offset.add(h_incoming);
    }
}

/// `d_{j,0} = sum_{i<N} h(prev state i, prev control i)`.
pub fn init_offset(prev: &Trajectory, map: &dyn OutputMap, horizon: usize) -> Result<Vec<f64>> {
    let p = map.output_dim();
    let mut acc = CompensatedSum::zeros(p);
    let mut y = vec![0.0; p];
    for i in 0..horizon {
        let (x, u) = prev.extend_lookup(i)?;
        map.eval(x, u, &mut y);
        acc.add(&y);
    }
    Ok(acc.value())
}

/// `d' = d - h_applied + h_incoming`.
pub fn update_offset(d: &[f64], h_applied: &[f64], h_incoming: &[f64]) -> Result<Vec<f64>> {
    check_dim(d.len(), h_applied.len())?;
    check_dim(d.len(), h_incoming.len())?;
    Ok(d.iter()
        .zip(h_applied)
        .zip(h_incoming)
        .map(|((d, a), b)| d - a + b)
        .collect())
}

/// Closed form `sum_{i<k+N} h_{j-1}(i) - sum_{i<k} h_j(i)` of the offset
/// after `k` updates, evaluated directly.
pub fn closed_form_offset(
    prev: &Trajectory,
    current: &Trajectory,
    map: &dyn OutputMap,
    horizon: usize,
    k: usize,
) -> Result<Vec<f64>> {
    let p = map.output_dim();
    let mut acc = CompensatedSum::zeros(p);
    let mut y = vec![0.0; p];
    for i in 0..k + horizon {
        let (x, u) = prev.extend_lookup(i)?;
        map.eval(x, u, &mut y);
        acc.add(&y);
    }
    for i in 0..k {
        let (x, u) = current.extend_lookup(i)?;
        map.eval(x, u, &mut y);
        acc.sub(&y);
    }
    Ok(acc.value())
}

/// Adds the summed-output constraint `sum h - d in Y0` to `problem`.
pub fn attach_to_problem(
    mut problem: NlpProblem,
    spec: &AverageConstraintSpec,
    offset: &[f64],
) -> Result<NlpProblem> {
    check_dim(spec.output_dim(), offset.len())?;
    problem.summed_output = Some(SummedOutputConstraint {
        map: spec.map.clone(),
        base: spec.base.clone(),
        offset: offset.to_vec(),
    });
    Ok(problem)
}

/// Running averages of an output sequence and membership in the target set.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageReport {
    /// `running[k]` is the mean of the first `k + 1` values (flattened, `p` each).
    pub running: Vec<f64>,
    pub final_average: Vec<f64>,
    pub slack: f64,
    /// Worst distance of the final average to the target set.
    pub violation: f64,
    pub within_target: bool,
}

pub const AVERAGE_SLACK: f64 = 1e-3;

/// Running means of `values` (each of length `p`, flattened) checked against
/// `target` with slack `slack`.
pub fn asymptotic_average(
    values: &[f64],
    p: usize,
    target: &BoxSet,
    slack: f64,
) -> Result<AverageReport> {
    if p == 0 || values.is_empty() || values.len() % p != 0 {
        return Err(Error::InvalidConfig(
            "average needs a nonempty sequence of p-vectors".into(),
        ));
    }
    check_dim(p, target.dim())?;
    let mut acc = CompensatedSum::zeros(p);
    let mut running = Vec::with_capacity(values.len());
    for (k, v) in values.chunks(p).enumerate() {
        acc.add(v);
        let count = (k + 1) as f64;
        running.extend(acc.value().iter().map(|s| s / count));
    }
    let final_average = running[running.len() - p..].to_vec();
    let violation = target.max_violation(&final_average);
    Ok(AverageReport {
        running,
        final_average,
        slack,
        violation,
        within_target: violation <= slack,
    })
}
