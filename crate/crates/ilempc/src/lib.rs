//! Runner, file formats, reports and the command-line driver for the
//! iterative learning economic MPC core.

pub mod checks;
pub mod cli;
pub mod config;
pub mod formats;
pub mod report;
pub mod run;

pub use ilempc_core as core;
