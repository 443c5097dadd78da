//! Iterative learning economic MPC for repetitive tasks.
//!
//! The crate is `no_std` (it needs `alloc`). IO, file formats and the
//! command-line driver live in the companion `ilempc` crate.

#![no_std]

extern crate alloc;

pub mod analysis;
pub mod average;
pub mod controller;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod math;
pub mod plants;
pub mod scenario;
pub mod solver;

pub use cost::{QuadraticCost, ReferenceSignal, StageCost, TrackingCost, ZeroCost};
pub use dynamics::{
    check_feasible, rollout, BoxSet, Extension, FeasibilityReport, PlantModel, Trajectory,
};
pub use error::{Error, Result};
pub use solver::{NlpProblem, NlpSolution, SolveStatus, Solver, SolverSettings};
