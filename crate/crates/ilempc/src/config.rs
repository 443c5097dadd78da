//! Key-value overrides of scenario defaults.
//!
//! Grammar, one setting per line:
//!
//! ```text
//! line    := blank | comment | setting
//! comment := '#' anything
//! setting := key '=' value [comment]
//! ```
//!
//! Keys: `iterations`, `horizon`, `t_sim`, `window_fraction`, `y0_scale`,
//! `eps_kkt`, `eps_eq`, `eps_feas`, `max_outer`, `max_inner`,
//! `max_inner_total`, `periodic_gap_tol`, `multiplier_init` (`zero` or `least-squares`),
//! `trace` (`true` or `false`). Command-line flags win over the file.

use std::fmt;
use std::str::FromStr;

use ilempc_core::solver::MultiplierInit;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub iterations: Option<usize>,
    pub horizon: Option<usize>,
    pub t_sim: Option<usize>,
    pub window_fraction: Option<f64>,
    /// Scales the base set `Y0` of the average constraint.
    pub y0_scale: Option<f64>,
    pub eps_kkt: Option<f64>,
    pub eps_eq: Option<f64>,
    pub eps_feas: Option<f64>,
    pub max_outer: Option<usize>,
    pub max_inner: Option<usize>,
    pub max_inner_total: Option<usize>,
    pub periodic_gap_tol: Option<f64>,
    pub multiplier_init: Option<MultiplierInit>,
    pub trace: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>().map(Some).map_err(|e| ConfigError {
        line,
        message: format!("bad value `{raw}` for `{key}`: {e}"),
    })
}

impl Overrides {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut o = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, val) = content.split_once('=').ok_or_else(|| ConfigError {
                line,
                message: format!("expected `key = value`, found `{content}`"),
            })?;
            let (key, val) = (key.trim(), val.trim());
            match key {
                "iterations" => o.iterations = value(line, key, val)?,
                "horizon" => o.horizon = value(line, key, val)?,
                "t_sim" => o.t_sim = value(line, key, val)?,
                "window_fraction" => o.window_fraction = value(line, key, val)?,
                "y0_scale" => o.y0_scale = value(line, key, val)?,
                "eps_kkt" => o.eps_kkt = value(line, key, val)?,
                "eps_eq" => o.eps_eq = value(line, key, val)?,
                "eps_feas" => o.eps_feas = value(line, key, val)?,
                "max_outer" => o.max_outer = value(line, key, val)?,
                "max_inner" => o.max_inner = value(line, key, val)?,
                "max_inner_total" => o.max_inner_total = value(line, key, val)?,
                "periodic_gap_tol" => o.periodic_gap_tol = value(line, key, val)?,
                "trace" => o.trace = value(line, key, val)?,
                "multiplier_init" => {
                    o.multiplier_init = Some(match val {
                        "zero" => MultiplierInit::Zero,
                        "least-squares" => MultiplierInit::LeastSquares,
                        other => return Err(ConfigError {
                            line,
                            message: format!(
                                "multiplier_init must be `zero` or `least-squares`, not `{other}`"
                            ),
                        }),
                    })
                }
                other => {
                    return Err(ConfigError {
                        line,
                        message: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        Ok(o)
    }

    /// `self` with every setting present in `top` replaced.
    pub fn overlay(mut self, top: &Overrides) -> Self {
        macro_rules! take {
            ($($f:ident),*) => {$(if top.$f.is_some() { self.$f = top.$f; })*};
        }
        take!(
            iterations,
            horizon,
            t_sim,
            window_fraction,
            y0_scale,
            eps_kkt,
            eps_eq,
            eps_feas,
            max_outer,
            max_inner,
            max_inner_total,
            periodic_gap_tol,
            multiplier_init,
            trace
        );
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_settings_and_comments() {
        let o = Overrides::parse("# reactor sweep\niterations = 4\n\ny0_scale=0.5 # half\nmultiplier_init = zero\ntrace = true\n").unwrap();
        assert_eq!(o.iterations, Some(4));
        assert_eq!(o.y0_scale, Some(0.5));
        assert_eq!(o.multiplier_init, Some(MultiplierInit::Zero));
        assert_eq!(o.trace, Some(true));
        assert_eq!(o.horizon, None);
    }

    #[test]
    fn reports_the_offending_line() {
        let e = Overrides::parse("horizon = 4\nhorizon 5\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = Overrides::parse("speed = 3\n").unwrap_err();
        assert!(e.message.contains("unknown key"));
        assert!(Overrides::parse("t_sim = -1").is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let file = Overrides::parse("iterations = 4\nhorizon = 3").unwrap();
        let flags = Overrides {
            iterations: Some(9),
            ..Default::default()
        };
        let merged = file.overlay(&flags);
        assert_eq!(merged.iterations, Some(9));
        assert_eq!(merged.horizon, Some(3));
    }
}
