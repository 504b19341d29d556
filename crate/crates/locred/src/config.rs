//! Flat key=value experiment configuration: parsing, defaults, and the
//! round-trippable serialization embedded in `summary.txt`.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::diagnostics::format_float;
use crate::fields::{FieldSpec, Rect};
use crate::{Error, Result};

/// `1 / (sqrt(2) pi)`, the Friedrichs constant of the unit square domain.
pub const DEFAULT_C_F: f64 = 0.225_079_079_039_276_44;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgorithmChoice {
    ResidualBased,
    GloballyCoupled,
    Both,
}

impl fmt::Display for AlgorithmChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlgorithmChoice::ResidualBased => "residual_based",
            AlgorithmChoice::GloballyCoupled => "globally_coupled",
            AlgorithmChoice::Both => "both",
        })
    }
}

impl FromStr for AlgorithmChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual_based" => Ok(AlgorithmChoice::ResidualBased),
            "globally_coupled" => Ok(AlgorithmChoice::GloballyCoupled),
            "both" => Ok(AlgorithmChoice::Both),
            other => Err(Error::Config(format!(
                "unknown algorithm '{other}' (expected residual_based, globally_coupled or both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_squares: usize,
    pub subdomain_size: f64,
    pub subdomain_step: f64,
    pub algorithm: AlgorithmChoice,
    pub kappa_spec: FieldSpec,
    pub f_spec: FieldSpec,
    pub tol_abs: f64,
    pub tol_rel: Option<f64>,
    pub max_iter: usize,
    pub output_dir: PathBuf,
    pub c_f: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_squares: 50,
            subdomain_size: 0.2,
            subdomain_step: 0.1,
            algorithm: AlgorithmChoice::Both,
            kappa_spec: FieldSpec::default_kappa(),
            f_spec: FieldSpec::default_f(),
            tol_abs: 0.0,
            tol_rel: Some(1e-6),
            max_iter: 600,
            output_dir: PathBuf::from("out"),
            c_f: DEFAULT_C_F,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key}={value}")))
}

fn parse_rect(key: &str, value: &str) -> Result<Rect> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err(Error::Config(format!(
            "{key}={value}: expected x0,y0,x1,y1,value"
        )));
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| parse_num(key, p))
        .collect::<Result<_>>()?;
    Ok(Rect {
        x0: nums[0],
        y0: nums[1],
        x1: nums[2],
        y1: nums[3],
        value: nums[4],
    })
}

impl ExperimentConfig {
    /// Parse key=value lines.  `#` starts a comment; keys prefixed
    /// `result_` are run outputs and are skipped, which is what makes a
    /// `summary.txt` directly reusable as a config file.  Unknown keys are
    /// errors.  A `kappa_background`/`kappa_rect` key replaces the default
    /// conductivity spec entirely (same for `f_*`).
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut kappa_background: Option<f64> = None;
        let mut kappa_rects: Vec<Rect> = Vec::new();
        let mut kappa_given = false;
        let mut f_background: Option<f64> = None;
        let mut f_rects: Vec<Rect> = Vec::new();
        let mut f_given = false;

        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                _ if key.starts_with("result_") => {}
                "n_squares" => cfg.n_squares = parse_num(key, value)?,
                "subdomain_size" => cfg.subdomain_size = parse_num(key, value)?,
                "subdomain_step" => cfg.subdomain_step = parse_num(key, value)?,
                "algorithm" => cfg.algorithm = value.parse()?,
                "tol_abs" => cfg.tol_abs = parse_num(key, value)?,
                "tol_rel" => {
                    cfg.tol_rel = if value == "none" {
                        None
                    } else {
                        Some(parse_num(key, value)?)
                    }
                }
                "max_iter" => cfg.max_iter = parse_num(key, value)?,
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "c_f" => cfg.c_f = parse_num(key, value)?,
                "kappa_background" => {
                    kappa_background = Some(parse_num(key, value)?);
                    kappa_given = true;
                }
                "kappa_rect" => {
                    kappa_rects.push(parse_rect(key, value)?);
                    kappa_given = true;
                }
                "f_background" => {
                    f_background = Some(parse_num(key, value)?);
                    f_given = true;
                }
                "f_rect" => {
                    f_rects.push(parse_rect(key, value)?);
                    f_given = true;
                }
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        if kappa_given {
            cfg.kappa_spec = FieldSpec {
                background: kappa_background.unwrap_or(1.0),
                rects: kappa_rects,
            };
        }
        if f_given {
            cfg.f_spec = FieldSpec {
                background: f_background.unwrap_or(0.0),
                rects: f_rects,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cheap structural checks; geometric validation (grid alignment,
    /// cover) happens in the modules that own the invariants.
    pub fn validate(&self) -> Result<()> {
        if self.n_squares < 1 {
            return Err(Error::Config("n_squares must be at least 1".into()));
        }
        if !(self.subdomain_size > 0.0 && self.subdomain_size <= 1.0) {
            return Err(Error::Config("subdomain_size must be in (0, 1]".into()));
        }
        if !(self.subdomain_step > 0.0 && self.subdomain_step <= self.subdomain_size) {
            return Err(Error::Config(
                "subdomain_step must be positive and at most subdomain_size".into(),
            ));
        }
        if !(self.tol_abs >= 0.0) {
            return Err(Error::Config("tol_abs must be nonnegative".into()));
        }
        if let Some(t) = self.tol_rel {
            if !(t >= 0.0) {
                return Err(Error::Config("tol_rel must be nonnegative".into()));
            }
        }
        if !(self.c_f > 0.0) {
            return Err(Error::Config("c_f must be positive".into()));
        }
        if self.kappa_spec.background <= 0.0
            || self.kappa_spec.rects.iter().any(|r| r.value <= 0.0)
        {
            return Err(Error::Config("conductivity values must be positive".into()));
        }
        Ok(())
    }

    /// The resolved configuration as parseable key=value lines; parsing
    /// them reproduces `self` exactly (floats are written with 17
    /// significant digits).
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("n_squares={}\n", self.n_squares));
        s.push_str(&format!(
            "subdomain_size={}\n",
            format_float(self.subdomain_size)
        ));
        s.push_str(&format!(
            "subdomain_step={}\n",
            format_float(self.subdomain_step)
        ));
        s.push_str(&format!("algorithm={}\n", self.algorithm));
        s.push_str(&format!("tol_abs={}\n", format_float(self.tol_abs)));
        match self.tol_rel {
            Some(t) => s.push_str(&format!("tol_rel={}\n", format_float(t))),
            None => s.push_str("tol_rel=none\n"),
        }
        s.push_str(&format!("max_iter={}\n", self.max_iter));
        s.push_str(&format!("output_dir={}\n", self.output_dir.display()));
        s.push_str(&format!("c_f={}\n", format_float(self.c_f)));
        s.push_str(&format!(
            "kappa_background={}\n",
            format_float(self.kappa_spec.background)
        ));
        for r in &self.kappa_spec.rects {
            s.push_str(&format!(
                "kappa_rect={},{},{},{},{}\n",
                format_float(r.x0),
                format_float(r.y0),
                format_float(r.x1),
                format_float(r.y1),
                format_float(r.value)
            ));
        }
        s.push_str(&format!(
            "f_background={}\n",
            format_float(self.f_spec.background)
        ));
        for r in &self.f_spec.rects {
            s.push_str(&format!(
                "f_rect={},{},{},{},{}\n",
                format_float(r.x0),
                format_float(r.y0),
                format_float(r.x1),
                format_float(r.y1),
                format_float(r.value)
            ));
        }
        s
    }
}
