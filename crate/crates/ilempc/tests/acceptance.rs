//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release -p ilempc --test acceptance -- --nocapture`.
//! The lines are also written to `acceptance_report.txt` in the cargo
//! target temp directory. A FAIL line does not fail the test unless
//! `ILEMPC_ACCEPTANCE_STRICT=1` is set; errors while computing a criterion
//! always do.

#[path = "../../core/tests/common/solver_checks.rs"]
mod solver_checks;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::process::Command;
use std::sync::Arc;

use ilempc::checks::{monotone_slack, offset_identity_error, worst_rise};
use ilempc::config::Overrides;
use ilempc::run::{prepare, run, RunOutput};
use ilempc_core::analysis::{
    check_receding_horizon_optimality, perturb_window, problem2_equivalence, QuadraticStorage,
};
use ilempc_core::scenario::{make_scenario, oracle_long_horizon, oracle_optimal_reachable, Metric};
use ilempc_core::{check_feasible, plants, rollout, NlpProblem, QuadraticCost, Solver, StageCost};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LINEAR_REGULATOR_OPTIMUM: f64 = 49.9163600440;
const ORACLE_OPTIMUM: f64 = 49.916360043958505;

struct Criterion {
    id: usize,
    passed: bool,
    detail: String,
}

struct Runs {
    cache: HashMap<String, RunOutput>,
}

impl Runs {
    fn get(&mut self, name: &str, horizon: Option<usize>, iterations: usize) -> &RunOutput {
        let key = format!("{name}/{horizon:?}/{iterations}");
        self.cache.entry(key).or_insert_with(|| {
            let start = std::time::Instant::now();
            let o = Overrides {
                iterations: Some(iterations),
                horizon,
                ..Default::default()
            };
            let out = run(prepare(name, &o).expect("scenario prepares"), |_| {})
                .unwrap_or_else(|e| panic!("{name} aborted: {e}"));
            eprintln!(
                "ran {name} (N={}, J={iterations}) in {:.1} s",
                out.cfg.horizon,
                start.elapsed().as_secs_f64()
            );
            out
        })
    }
}

fn criterion_1() -> Criterion {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ilempc"))
        .args([
            "run",
            "linear-regulator",
            "--iters",
            "15",
            "--out",
            tmp.path().to_str().unwrap(),
        ])
        .output()
        .expect("binary runs");
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let dir = tmp.path().join("linear-regulator");
    let summary = std::fs::read_to_string(dir.join("learning_summary.csv")).unwrap();
    let last: Vec<&str> = summary.lines().last().unwrap().split(',').collect();
    let j15: f64 = last[1].parse().unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("analysis_report.json")).unwrap())
            .unwrap();
    let converged_at = report["convergence"]["converged_at"].as_u64();
    let cost_ok = (j15 - LINEAR_REGULATOR_OPTIMUM).abs() <= 1e-6;
    let conv_ok = converged_at.is_some_and(|j| j <= 5);
    Criterion {
        id: 1,
        passed: cost_ok && conv_ok,
        detail: format!(
            "J_15 = {j15:.10} (|gap| {:.1e}, {}); converged_at = {converged_at:?} ({})",
            (j15 - LINEAR_REGULATOR_OPTIMUM).abs(),
            if cost_ok { "ok" } else { "too far" },
            if conv_ok { "ok" } else { "later than 5" }
        ),
    }
}

fn criterion_2(runs: &mut Runs) -> Criterion {
    let scenario = make_scenario("linear-regulator").unwrap();
    let oracle = oracle_long_horizon(&scenario, 60).unwrap();
    let n5 = runs
        .get("linear-regulator", Some(5), 15)
        .last()
        .cumulative_cost;
    let oracle_ok = (oracle.objective - ORACLE_OPTIMUM).abs() <= 1e-6;
    let n5_ok = (n5 - oracle.objective).abs() <= 1e-6;
    Criterion {
        id: 2,
        passed: oracle_ok && n5_ok,
        detail: format!(
            "oracle(T=60) = {:.12} (|gap| {:.1e}); ILEMPC N=5 J_15 = {n5:.12} (|gap to oracle| {:.1e})",
            oracle.objective,
            (oracle.objective - ORACLE_OPTIMUM).abs(),
            (n5 - oracle.objective).abs()
        ),
    }
}

const BENCHMARKS: [&str; 5] = [
    "linear-regulator",
    "nonlinear-regulator",
    "linear-tracker",
    "unicycle",
    "reactor-economic",
];

fn criterion_3(runs: &mut Runs) -> Criterion {
    let mut passed = true;
    let mut detail = String::new();
    for name in BENCHMARKS {
        let out = runs.get(name, None, 15);
        let (rise, at) = worst_rise(out);
        let slack = monotone_slack(out.scenario.metric);
        passed &= rise <= slack;
        let _ = write!(
            detail,
            "{name}: max rise {rise:.1e} at j={} (slack {slack:.0e}); ",
            at.unwrap_or(0)
        );
    }
    Criterion {
        id: 3,
        passed,
        detail,
    }
}

fn criterion_4(runs: &mut Runs) -> Criterion {
    // Every run above completed, so no warm start was rejected.
    let mut worst = 0.0_f64;
    let mut solves = 0;
    for out in runs.cache.values() {
        for r in &out.records[1..] {
            worst = worst.max(r.max_terminal_residual);
            solves += r.stats.solves;
        }
    }
    Criterion {
        id: 4,
        passed: worst <= 1e-6,
        detail: format!(
            "{} runs, {solves} solves, 0 aborts, max terminal residual {worst:.1e}",
            runs.cache.len()
        ),
    }
}

fn criterion_5(runs: &mut Runs) -> Criterion {
    let out = runs.get("linear-regulator", Some(1), 3);
    let model = out.scenario.model().clone();
    let initial = &out.records[0].trajectory;
    let mut worst = 0.0_f64;
    for r in &out.records[1..] {
        for k in 0..=out.cfg.t_sim {
            worst = worst.max(model.state_distance(r.trajectory.state(k), initial.state(k)));
            if k < out.cfg.t_sim {
                for (a, b) in r.trajectory.control(k).iter().zip(initial.control(k)) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Criterion {
        id: 5,
        passed: worst <= 1e-5,
        detail: format!("N=1, 3 iterations: max distance to the initial trajectory {worst:.1e}"),
    }
}

fn criterion_6() -> Criterion {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let model = plants::linear_regulator().unwrap();
    let solver = Solver::default();
    let (mut worst_u, mut worst_gap) = (0.0_f64, 0.0_f64);
    for _ in 0..20 {
        let horizon = rng.gen_range(3..=8);
        let (x0, warm) = loop {
            let x0 = vec![rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)];
            let warm: Vec<f64> = (0..horizon).map(|_| rng.gen_range(-0.8..0.8)).collect();
            if check_feasible(&rollout(&model, &x0, &warm).unwrap(), &model, 0.0).feasible {
                break (x0, warm);
            }
        };
        let target = rollout(&model, &x0, &warm).unwrap().state(horizon).to_vec();
        let problem = NlpProblem::new(
            model.clone(),
            Arc::new(QuadraticCost::regulator(2, 1)),
            horizon,
            x0,
        )
        .with_terminal(target);
        let off = rng.gen_range(-1.0..1.0);
        let storage = QuadraticStorage::new(
            vec![0.0, 0.0],
            vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
            vec![rng.gen_range(-1.0..1.0), off, off, rng.gen_range(-1.0..1.0)],
        )
        .unwrap();
        let rep = problem2_equivalence(&problem, storage, &solver, &warm).unwrap();
        worst_u = worst_u.max(rep.control_distance);
        worst_gap = worst_gap.max(rep.gap_error());
    }
    Criterion {
        id: 6,
        passed: worst_u <= 1e-5 && worst_gap <= 1e-6,
        detail: format!("20 instances: max control distance {worst_u:.1e}, max objective-gap error {worst_gap:.1e}"),
    }
}

fn criterion_7(runs: &mut Runs) -> Criterion {
    let mut passed = true;
    let mut detail = String::new();
    for horizon in [4, 3] {
        let out = runs.get("linear-regulator", Some(horizon), 15);
        let cost: Arc<dyn StageCost> = out.scenario.cost().clone();
        let rep = check_receding_horizon_optimality(
            &out.last().trajectory,
            horizon,
            cost,
            out.scenario.model(),
            0..out.cfg.t_sim,
            &Solver::default(),
        )
        .unwrap();
        passed &= rep.verdict;
        let _ = write!(
            detail,
            "N={horizon}: max improvement {:.1e} over {} windows; ",
            rep.max_improvement,
            rep.windows.len()
        );
    }
    // Negative control: nudge one control of a window and re-pin its end.
    let out = runs.get("linear-regulator", Some(4), 15);
    let model = out.scenario.model().clone();
    let traj = &out.last().trajectory;
    let mut negative = None;
    for start in 0..out.cfg.t_sim - 4 {
        let Ok(p) = perturb_window(traj, &model, start, 4, 1, &[0.1]) else {
            continue;
        };
        if !check_feasible(&p, &model, 0.0).feasible {
            continue;
        }
        let cost: Arc<dyn StageCost> = out.scenario.cost().clone();
        let rep = check_receding_horizon_optimality(
            &p,
            4,
            cost,
            &model,
            start..start + 1,
            &Solver::default(),
        )
        .unwrap();
        negative = Some((start, rep.max_improvement));
        break;
    }
    match negative {
        Some((start, improvement)) => {
            passed &= improvement >= 1e-3;
            let _ = write!(
                detail,
                "perturbed window at k={start}: improvement {improvement:.1e} (needs >= 1e-3)"
            );
        }
        None => {
            passed = false;
            detail.push_str("no feasible perturbed window found");
        }
    }
    Criterion {
        id: 7,
        passed,
        detail,
    }
}

fn criterion_8(runs: &mut Runs) -> Criterion {
    let tracker = runs.get("linear-tracker", None, 15);
    let d34 = tracker.convergence.state_distance[3];
    let scenario = &tracker.scenario;
    let oracle = oracle_optimal_reachable(scenario).unwrap();
    let period = oracle.trajectory.len();
    let learned = &tracker.last().trajectory;
    let t_sim = tracker.cfg.t_sim;
    // The final period is pinned to the previous iteration's tail, which
    // carries no periodic extension; the period before it is the settled one.
    let mut match_err = 0.0_f64;
    for k in t_sim - 2 * period..=t_sim - period {
        match_err = match_err.max(
            scenario
                .model()
                .state_distance(learned.state(k), oracle.trajectory.state(k % period)),
        );
    }
    let tracker_ok = d34 <= 1e-5 && match_err <= 1e-3;

    let uni = runs.get("unicycle", None, 15);
    let avgs: Vec<f64> = uni.records.iter().map(|r| r.window_average).collect();
    let rises = avgs
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let late_change = avgs[10..]
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max);
    let uni_ok = rises <= 0.0 && late_change <= 1e-4;
    assert_eq!(uni.scenario.metric, Metric::Average);
    Criterion {
        id: 8,
        passed: tracker_ok && uni_ok,
        detail: format!(
            "tracker: |x_4 - x_3| = {d34:.1e} (needs <= 1e-5), second-to-last period vs oracle {match_err:.1e} (needs <= 1e-3); \
             unicycle: largest rise {rises:.1e}, largest change after j=10 {late_change:.1e} (needs <= 1e-4)"
        ),
    }
}

fn criterion_9(runs: &mut Runs) -> Criterion {
    let out = runs.get("reactor-economic", None, 15);
    let summed = out.records[1..]
        .iter()
        .map(|r| r.max_summed_residual)
        .fold(0.0, f64::max);
    let identity = offset_identity_error(out).unwrap();
    let finals: Vec<f64> = out.records[1..]
        .iter()
        .map(|r| r.average_log.last().unwrap().running_average[0])
        .collect();
    let in_range = finals.iter().all(|a| (0.0..=1.0 + 1e-3).contains(a));
    let last = *finals.last().unwrap();
    Criterion {
        id: 9,
        passed: summed <= 1e-6 && identity <= 1e-9 && in_range && last >= 0.95,
        detail: format!(
            "max summed residual {summed:.1e}; offset identity {identity:.1e} over {} steps; \
             final u1 averages in [{:.4}, {:.4}]; after j=15: {last:.6}",
            out.cfg.t_sim,
            finals.iter().cloned().fold(f64::INFINITY, f64::min),
            finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        ),
    }
}

fn criterion_10() -> Criterion {
    let results = [
        ("gradient", solver_checks::gradient_check(50)),
        ("KKT", solver_checks::kkt_check(20)),
        ("descent", solver_checks::descent_check(30)),
    ];
    let passed = results.iter().all(|(_, r)| r.is_ok());
    let detail = results
        .iter()
        .map(|(name, r)| match r {
            Ok(s) => format!("{name}: {s}"),
            Err(e) => format!("{name}: {e}"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    Criterion {
        id: 10,
        passed,
        detail,
    }
}

#[test]
fn acceptance_criteria() {
    let mut runs = Runs {
        cache: HashMap::new(),
    };
    let mut results = vec![
        criterion_1(),
        criterion_2(&mut runs),
        criterion_3(&mut runs),
    ];
    results.push(criterion_5(&mut runs));
    results.push(criterion_6());
    results.push(criterion_7(&mut runs));
    results.push(criterion_8(&mut runs));
    results.push(criterion_9(&mut runs));
    // after every benchmark run is cached
    results.push(criterion_4(&mut runs));
    results.push(criterion_10());
    results.sort_by_key(|c| c.id);

    let mut text = String::new();
    for c in &results {
        let _ = writeln!(
            text,
            "criterion {}: {} - {}",
            c.id,
            if c.passed { "PASS" } else { "FAIL" },
            c.detail
        );
    }
    print!("{text}");
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_report.txt");
    std::fs::write(&path, &text).unwrap();
    if std::env::var("ILEMPC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        assert!(
            results.iter().all(|c| c.passed),
            "failing criteria:\n{text}"
        );
    }
}
