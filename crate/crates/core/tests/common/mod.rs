pub mod solver_checks;
