mod common;

use common::solver_checks::{descent_check, gradient_check, kkt_check};

#[test]
fn gradient_matches_central_differences_on_all_plants() {
    println!("{}", gradient_check(50).unwrap());
}

#[test]
fn dense_kkt_oracle_agrees_on_random_lq_problems() {
    println!("{}", kkt_check(20).unwrap());
}

#[test]
fn solver_never_ascends_from_a_feasible_warm_start() {
    println!("{}", descent_check(30).unwrap());
}
