//! CSV files written by a run.
//!
//! Floats are written as `{:.16e}` (17 significant digits), which round-trips
//! every `f64` and keeps the output byte-identical between identical runs.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use ilempc_core::controller::IterationRecord;
use ilempc_core::dynamics::Extension;
use ilempc_core::Trajectory;

pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn header(prefix: &str, count: usize, out: &mut String) {
    for i in 1..=count {
        let _ = write!(out, ",{prefix}{i}");
    }
}

/// `k,x1..xn,u1..um`, one row per stored state; the last row has empty
/// control columns.
pub fn write_trajectory<W: Write>(mut w: W, traj: &Trajectory) -> io::Result<()> {
    let (n, m) = (traj.n(), traj.m());
    let mut line = String::from("k");
    header("x", n, &mut line);
    header("u", m, &mut line);
    writeln!(w, "{line}")?;
    for k in 0..=traj.len() {
        line.clear();
        let _ = write!(line, "{k}");
        for v in traj.state(k) {
            let _ = write!(line, ",{}", float(*v));
        }
        if k < traj.len() {
            for v in traj.control(k) {
                let _ = write!(line, ",{}", float(*v));
            }
        } else {
            line.push_str(&",".repeat(m));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn bad(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

/// Reads a file written by [`write_trajectory`] (no extension attached).
pub fn read_trajectory<R: BufRead>(r: R) -> io::Result<Trajectory> {
    let mut lines = r.lines();
    let head = lines
        .next()
        .ok_or_else(|| bad("empty trajectory file".into()))??;
    let cols: Vec<&str> = head.split(',').collect();
    let n = cols.iter().filter(|c| c.starts_with('x')).count();
    let m = cols.iter().filter(|c| c.starts_with('u')).count();
    if cols.first() != Some(&"k") || n + m + 1 != cols.len() {
        return Err(bad(format!("unexpected header `{head}`")));
    }
    let mut states = Vec::new();
    let mut controls = Vec::new();
    let mut last_seen = false;
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if last_seen {
            return Err(bad(format!("row {row} follows the final row")));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + m + 1 {
            return Err(bad(format!("row {row} has {} fields", fields.len())));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("row {row}: {e}")));
        for f in &fields[1..=n] {
            states.push(parse(f)?);
        }
        if fields[n + 1..].iter().all(|f| f.is_empty()) {
            last_seen = true;
        } else {
            for f in &fields[n + 1..] {
                controls.push(parse(f)?);
            }
        }
    }
    Trajectory::new(n, m, states, controls, Extension::None).map_err(|e| bad(e.to_string()))
}

pub const SUMMARY_HEADER: &str = "j,J_j,window_avg,max_terminal_residual,solver_outer_iters_total,full_avg,max_summed_residual,max_descent_gap,max_iter_solves";

pub fn write_summary<W: Write>(mut w: W, records: &[IterationRecord]) -> io::Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.j,
            float(r.cumulative_cost),
            float(r.window_average),
            float(r.max_terminal_residual),
            r.stats.outer_total,
            float(r.full_average),
            float(r.max_summed_residual),
            float(if r.max_descent_gap.is_finite() {
                r.max_descent_gap
            } else {
                0.0
            }),
            r.stats.max_iter_solves
        )?;
    }
    Ok(())
}

/// One parsed row of `learning_summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub j: usize,
    pub cumulative_cost: f64,
    pub window_average: f64,
    pub max_terminal_residual: f64,
    pub outer_total: usize,
}

pub fn read_summary<R: BufRead>(r: R) -> io::Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 5 {
            return Err(bad(format!("summary row {i} has {} fields", f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| bad(format!("summary row {i}: {e}")))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| bad(format!("summary row {i}: {e}")))
        };
        rows.push(SummaryRow {
            j: int(f[0])?,
            cumulative_cost: num(f[1])?,
            window_average: num(f[2])?,
            max_terminal_residual: num(f[3])?,
            outer_total: int(f[4])?,
        });
    }
    Ok(rows)
}

/// `j,k,h1..hp,d1..dp,residual,avg1..avgp` for every solve of every iteration.
pub fn write_average_log<W: Write>(mut w: W, records: &[IterationRecord]) -> io::Result<()> {
    let p = records
        .iter()
        .find_map(|r| r.average_log.first())
        .map_or(0, |s| s.h_applied.len());
    let mut line = String::from("j,k");
    header("h", p, &mut line);
    header("d", p, &mut line);
    line.push_str(",residual");
    header("avg", p, &mut line);
    writeln!(w, "{line}")?;
    for r in records {
        for s in &r.average_log {
            line.clear();
            let _ = write!(line, "{},{}", r.j, s.k);
            for v in s.h_applied.iter().chain(&s.offset) {
                let _ = write!(line, ",{}", float(*v));
            }
            let _ = write!(line, ",{}", float(s.residual));
            for v in &s.running_average {
                let _ = write!(line, ",{}", float(*v));
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

/// `k,outer,penalty,residual,objective,inner_iterations` per outer iteration.
pub fn write_trace<W: Write>(mut w: W, record: &IterationRecord) -> io::Result<()> {
    writeln!(w, "k,outer,penalty,residual,objective,inner_iterations")?;
    for (k, trace) in record.traces.iter().enumerate() {
        for t in trace {
            writeln!(
                w,
                "{k},{},{},{},{},{}",
                t.outer,
                float(t.penalty),
                float(t.residual),
                float(t.objective),
                t.inner_iterations
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ilempc_core::{plants, rollout};

    #[test]
    fn trajectory_round_trips_exactly() {
        let model = plants::unicycle().unwrap();
        let u: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let traj = rollout(&model, &[0.1, -0.2, 1.0 / 3.0, 0.5], &u).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("k,x1,x2,x3,x4,u1,u2\n"));
        assert!(text.trim_end().ends_with(",,"));
        let back = read_trajectory(&buf[..]).unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn summary_parses_back() {
        let text = format!(
            "{SUMMARY_HEADER}\n3,{},{},{},17,0,0,0,0\n",
            float(49.5),
            float(0.25),
            float(1e-9)
        );
        let rows = read_summary(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].j, 3);
        assert_eq!(rows[0].cumulative_cost, 49.5);
        assert_eq!(rows[0].outer_total, 17);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        assert!(read_trajectory("k,x1,u1\n0,1.0\n".as_bytes()).is_err());
        assert!(read_trajectory("".as_bytes()).is_err());
    }
}
