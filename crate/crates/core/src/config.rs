//! Run configuration: defaults, overridden by a TOML file, overridden by
//! command-line flags.
//!
//! Keys live in sections named after pipeline stages (`[affinity]`,
//! `[expand]`, ...) or as dotted keys (`affinity.radius = 2`). Any key not
//! listed in [`Config::KEYS`] is rejected.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;
use toml::{Table, Value};

use crate::affinity::FineParams;
use crate::coarse::CoarseParams;
use crate::expand::ExpandMode;
use crate::raster::default_pad;
use crate::stabilizer::{default_sigma, Fill};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadSetting {
    /// One eighth of the frame width.
    #[default]
    Auto,
    Fixed(usize),
}

impl PadSetting {
    pub fn resolve(&self, frame_width: usize) -> usize {
        match *self {
            PadSetting::Auto => default_pad(frame_width),
            PadSetting::Fixed(p) => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowChoice {
    Baseline,
    /// Precomputed `.flo` files in a directory.
    Files(String),
}

impl FlowChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(FlowChoice::Baseline),
            _ => s
                .strip_prefix("files:")
                .filter(|d| !d.is_empty())
                .map(|d| FlowChoice::Files(d.to_string())),
        }
    }

    pub fn as_string(&self) -> String {
        match self {
            FlowChoice::Baseline => "baseline".into(),
            FlowChoice::Files(d) => format!("files:{d}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub pad: PadSetting,
    pub coarse: CoarseParams,
    pub flow: FlowChoice,
    pub fine: FineParams,
    pub iterations: usize,
    pub mode: ExpandMode,
    pub window: usize,
    /// `None` means one sixth of the window.
    pub sigma: Option<f64>,
    pub fill: Fill,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            pad: PadSetting::Auto,
            coarse: CoarseParams::default(),
            flow: FlowChoice::Baseline,
            fine: FineParams::default(),
            iterations: 10,
            mode: ExpandMode::Full,
            window: 31,
            sigma: None,
            fill: Fill::None,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        message: message.into(),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize, ConfigError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(bad(key, "expected a non-negative integer")),
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64, ConfigError> {
    match v {
        Value::Float(f) if f.is_finite() => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, "expected a number")),
    }
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str, ConfigError> {
    v.as_str().ok_or_else(|| bad(key, "expected a string"))
}

fn positive(key: &str, x: f64) -> Result<f64, ConfigError> {
    if x > 0.0 {
        Ok(x)
    } else {
        Err(bad(key, "must be positive"))
    }
}

impl Config {
    /// Every accepted key, in report order.
    pub const KEYS: [&'static str; 21] = [
        "seed",
        "canvas.pad",
        "coarse.rows",
        "coarse.cols",
        "coarse.median_radius",
        "coarse.median_sigma",
        "coarse.ransac_iterations",
        "coarse.ransac_threshold",
        "flow.estimator",
        "affinity.radius",
        "affinity.sigma_color",
        "affinity.sigma_edge",
        "propagation.lambda_cap",
        "propagation.max_sweeps",
        "propagation.tolerance_px",
        "propagation.anchor_ratio",
        "expand.iterations",
        "expand.mode",
        "stabilizer.window",
        "stabilizer.sigma",
        "stabilizer.fill",
    ];

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse {
                line: e.span().map_or(1, |s| line_of(text, s.start)),
                message: e.message().to_string(),
            })?;
        let mut cfg = Config::default();
        let mut flat = vec![];
        flatten("", &table, &mut flat);
        for (key, value) in flat {
            cfg.set(&key, &value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    /// Applies one `section.key` assignment.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = as_usize(key, v)? as u64,
            "canvas.pad" => {
                self.pad = match v {
                    Value::String(s) if s == "auto" => PadSetting::Auto,
                    _ => PadSetting::Fixed(as_usize(key, v)?),
                }
            }
            "coarse.rows" => self.coarse.rows = as_usize(key, v)?.max(1),
            "coarse.cols" => self.coarse.cols = as_usize(key, v)?.max(1),
            "coarse.median_radius" => self.coarse.median_radius = positive(key, as_f64(key, v)?)?,
            "coarse.median_sigma" => self.coarse.median_sigma = positive(key, as_f64(key, v)?)?,
            "coarse.ransac_iterations" => self.coarse.ransac.iterations = as_usize(key, v)?.max(1),
            "coarse.ransac_threshold" => {
                self.coarse.ransac.threshold = positive(key, as_f64(key, v)?)?
            }
            "flow.estimator" => {
                let s = as_str(key, v)?;
                self.flow = FlowChoice::parse(s)
                    .ok_or_else(|| bad(key, "expected `baseline` or `files:<dir>`"))?;
            }
            "affinity.radius" => {
                let r = as_usize(key, v)?;
                if r == 0 {
                    return Err(bad(key, "must be at least 1"));
                }
                self.fine.affinity.radius = r;
            }
            "affinity.sigma_color" => {
                self.fine.affinity.sigma_color = positive(key, as_f64(key, v)?)?
            }
            "affinity.sigma_edge" => {
                self.fine.affinity.sigma_edge = positive(key, as_f64(key, v)?)?
            }
            "propagation.lambda_cap" => {
                let c = as_f64(key, v)?;
                if !(0.0..1.0).contains(&c) {
                    return Err(bad(key, "must lie in [0, 1)"));
                }
                self.fine.propagation.lambda_cap = c;
            }
            "propagation.max_sweeps" => self.fine.propagation.max_sweeps = as_usize(key, v)?,
            "propagation.tolerance_px" => {
                self.fine.propagation.tolerance_px = positive(key, as_f64(key, v)?)?
            }
            "propagation.anchor_ratio" => {
                let a = as_f64(key, v)?;
                if !(0.0..=1.0).contains(&a) {
                    return Err(bad(key, "must lie in [0, 1]"));
                }
                self.fine.propagation.anchor_ratio = a;
            }
            "expand.iterations" => self.iterations = as_usize(key, v)?,
            "expand.mode" => {
                self.mode = as_str(key, v)?
                    .parse()
                    .map_err(|e: crate::expand::ExpandError| bad(key, e.to_string()))?
            }
            "stabilizer.window" => {
                let w = as_usize(key, v)?;
                if w < 3 || w % 2 == 0 {
                    return Err(bad(key, "must be odd and at least 3"));
                }
                self.window = w;
            }
            "stabilizer.sigma" => self.sigma = Some(positive(key, as_f64(key, v)?)?),
            "stabilizer.fill" => {
                self.fill = as_str(key, v)?
                    .parse()
                    .map_err(|e: crate::stabilizer::StabilizeError| bad(key, e.to_string()))?
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| default_sigma(self.window))
    }

    /// The effective configuration as TOML, every key present.
    pub fn to_toml(&self, frame_width: Option<usize>) -> String {
        let mut s = String::new();
        let pad = match (self.pad, frame_width) {
            (PadSetting::Fixed(p), _) => p.to_string(),
            (PadSetting::Auto, Some(w)) => default_pad(w).to_string(),
            (PadSetting::Auto, None) => "\"auto\"".to_string(),
        };
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "\n[canvas]\npad = {pad}");
        let c = &self.coarse;
        let _ = writeln!(
            s,
            "\n[coarse]\nrows = {}\ncols = {}\nmedian_radius = {:?}\nmedian_sigma = {:?}\nransac_iterations = {}\nransac_threshold = {:?}",
            c.rows, c.cols, c.median_radius, c.median_sigma, c.ransac.iterations, c.ransac.threshold
        );
        let _ = writeln!(s, "\n[flow]\nestimator = \"{}\"", self.flow.as_string());
        let a = &self.fine.affinity;
        let _ = writeln!(
            s,
            "\n[affinity]\nradius = {}\nsigma_color = {:?}\nsigma_edge = {:?}",
            a.radius, a.sigma_color, a.sigma_edge
        );
        let p = &self.fine.propagation;
        let _ = writeln!(
            s,
            "\n[propagation]\nlambda_cap = {:?}\nmax_sweeps = {}\ntolerance_px = {:?}\nanchor_ratio = {:?}",
            p.lambda_cap, p.max_sweeps, p.tolerance_px, p.anchor_ratio
        );
        let _ = writeln!(
            s,
            "\n[expand]\niterations = {}\nmode = \"{}\"",
            self.iterations, self.mode
        );
        let _ = writeln!(
            s,
            "\n[stabilizer]\nwindow = {}\nsigma = {:?}\nfill = \"{}\"",
            self.window,
            self.sigma(),
            self.fill
        );
        s
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml_str("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.fine.affinity.radius, 4);
        assert_eq!(c.iterations, 10);
        assert_eq!(c.pad.resolve(640), 80);
        assert_eq!(c.fine.propagation.anchor_ratio, 0.9);
    }

    #[test]
    fn dotted_and_sectioned_keys() {
        let a = Config::from_toml_str("affinity.radius = 2").unwrap();
        let b = Config::from_toml_str("[affinity]\nradius = 2\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fine.affinity.radius, 2);
        let c = Config::from_toml_str(
            "canvas.pad = 12\nexpand.mode = \"coarse\"\nstabilizer.fill = \"nearest\"",
        )
        .unwrap();
        assert_eq!(c.pad, PadSetting::Fixed(12));
        assert_eq!(c.mode, ExpandMode::CoarseOnly);
        assert_eq!(c.fill, Fill::Nearest);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert_eq!(
            Config::from_toml_str("bogus.key = 1"),
            Err(ConfigError::UnknownKey("bogus.key".into()))
        );
        assert_eq!(
            Config::from_toml_str("[affinity]\nradus = 3"),
            Err(ConfigError::UnknownKey("affinity.radus".into()))
        );
    }

    #[test]
    fn parse_errors_carry_line() {
        match Config::from_toml_str("seed = 1\n\naffinity.radius = = 2\n") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values_rejected() {
        assert!(matches!(
            Config::from_toml_str("affinity.radius = 0"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            Config::from_toml_str("stabilizer.window = 4"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            Config::from_toml_str("expand.mode = \"warp\""),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            Config::from_toml_str("flow.estimator = \"files:\""),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn report_roundtrips() {
        let mut c = Config::from_toml_str("affinity.radius = 3\nflow.estimator = \"files:/tmp/f\"")
            .unwrap();
        c.sigma = Some(2.5);
        let back = Config::from_toml_str(&c.to_toml(None)).unwrap();
        assert_eq!(back, c);
        for key in Config::KEYS {
            let (sec, name) = key.split_once('.').unwrap_or(("", key));
            let text = c.to_toml(None);
            assert!(
                text.contains(&format!("[{sec}]")) || sec.is_empty(),
                "{key}"
            );
            assert!(text.contains(&format!("{name} = ")), "{key}");
        }
    }
}
