use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ilempc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilempc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn list_names_every_scenario() {
    let o = ilempc(&["list"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for name in [
        "linear-regulator",
        "nonlinear-regulator",
        "linear-tracker",
        "unicycle",
        "reactor-economic",
        "reactor-convexified",
    ] {
        assert!(text.lines().any(|l| l == name), "{name} missing");
    }
}

#[test]
fn linear_regulator_run_writes_outputs_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let o = ilempc(&[
            "run",
            "linear-regulator",
            "--iters",
            "15",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let run_a = a.join("linear-regulator");
    let summary = fs::read_to_string(run_a.join("learning_summary.csv")).unwrap();
    assert!(summary.starts_with("j,J_j,window_avg,max_terminal_residual,solver_outer_iters_total"));
    let last = summary.lines().last().unwrap();
    let fields: Vec<&str> = last.split(',').collect();
    assert_eq!(fields[0], "15");
    let j15: f64 = fields[1].parse().unwrap();
    assert!((j15 - 49.9163600440).abs() <= 1e-6, "J_15 = {j15}");
    for j in 0..=15 {
        assert!(run_a.join(format!("iter_{j}.csv")).is_file());
    }
    assert!(run_a.join("analysis_report.json").is_file());
    assert!(!run_a.join("average_constraint.csv").exists());
    assert_eq!(
        read_dir_sorted(&run_a),
        read_dir_sorted(&b.join("linear-regulator"))
    );

    let o = ilempc(&["report", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("linear-regulator"));
    assert!(stdout(&o).contains("49.9163600440"));
}

#[test]
fn verify_passes_on_the_linear_regulator() {
    let o = ilempc(&["verify", "linear-regulator"]);
    let text = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn oracle_reports_the_long_horizon_optimum() {
    let o = ilempc(&["oracle", "linear-regulator"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(
        stdout(&o).contains("objective 49.916360043"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn configuration_errors_exit_with_two() {
    assert_eq!(ilempc(&["run", "no-such-plant"]).status.code(), Some(2));
    assert_eq!(
        ilempc(&["run", "linear-regulator", "--horizon", "0"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        ilempc(&["run", "linear-regulator", "--y0-scale", "2"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        ilempc(&["run", "linear-regulator", "--iters", "abc"])
            .status
            .code(),
        Some(2)
    );
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "horizon = 4\nnot a setting\n").unwrap();
    let o = ilempc(&["run", "linear-regulator", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    assert_eq!(
        ilempc(&["report", tmp.path().to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn config_file_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("short.cfg");
    fs::write(&cfg, "# three iterations\niterations = 3\nhorizon = 5\n").unwrap();
    let out = tmp.path().join("out");
    let o = ilempc(&[
        "run",
        "linear-regulator",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let summary = fs::read_to_string(out.join("linear-regulator/learning_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    let report = fs::read_to_string(out.join("linear-regulator/analysis_report.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["parameters"]["N"], "5");
}
