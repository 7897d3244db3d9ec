//! Pipeline configuration as flat `key = value` text.
//!
//! ```text
//! # thresholds
//! theta_o = 0.8
//! provider = dir:/data/scene-3
//! ```

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::superpixel::FelzenszwalbParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    Value { key: String, value: String, reason: String },
}

/// Where mask triples come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderSpec {
    Oracle,
    Dir(PathBuf),
    Exec(String),
}

impl FromStr for ProviderSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "oracle" {
            Ok(Self::Oracle)
        } else if let Some(p) = s.strip_prefix("dir:") {
            Ok(Self::Dir(PathBuf::from(p)))
        } else if let Some(c) = s.strip_prefix("exec:") {
            Ok(Self::Exec(c.to_owned()))
        } else {
            Err("expected oracle, dir:<path> or exec:<command>".into())
        }
    }
}

impl fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Oracle => f.write_str("oracle"),
            Self::Dir(p) => write!(f, "dir:{}", p.display()),
            Self::Exec(c) => write!(f, "exec:{c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub theta_o: f64,
    pub gamma_o: f64,
    pub n_t: f64,
    pub grid_coarse: u32,
    pub grid_fine: u32,
    pub delta: f64,
    pub tau: f64,
    pub top_k: usize,
    pub merge_threshold: f64,
    pub containment_gamma: f64,
    /// Fraction of each merge partner a gallery mask must cover.
    pub merge_cover: f64,
    pub rho: f64,
    pub coverage_fraction: f64,
    pub containment_frac: f64,
    pub min_region_px: u64,
    pub min_gain_px: u64,
    /// Fraction of a USR candidate that must be new coverage.
    pub min_gain_frac: f64,
    /// USR candidates scored below this are discarded.
    pub usr_min_score: f64,
    pub sp_scale: f64,
    pub sp_sigma: f64,
    /// `None` scales the minimum superpixel size with the image.
    pub sp_min_size: Option<u32>,
    pub provider: ProviderSpec,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            theta_o: 0.8,
            gamma_o: 0.6,
            n_t: 0.5,
            grid_coarse: 32,
            grid_fine: 64,
            delta: 0.05,
            tau: 0.1,
            top_k: 6,
            merge_threshold: 0.2,
            containment_gamma: 0.7,
            merge_cover: 0.5,
            rho: 0.1,
            coverage_fraction: 0.5,
            containment_frac: 0.9,
            min_region_px: 64,
            min_gain_px: 64,
            min_gain_frac: 0.5,
            usr_min_score: 0.0,
            sp_scale: 200.0,
            sp_sigma: 0.8,
            sp_min_size: None,
            provider: ProviderSpec::Oracle,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "theta_o",
    "gamma_o",
    "n_t",
    "grid_coarse",
    "grid_fine",
    "delta",
    "tau",
    "top_k",
    "merge_threshold",
    "containment_gamma",
    "merge_cover",
    "rho",
    "coverage_fraction",
    "containment_frac",
    "min_region_px",
    "min_gain_px",
    "min_gain_frac",
    "usr_min_score",
    "sp_scale",
    "sp_sigma",
    "sp_min_size",
    "provider",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn ratio(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse(key, value)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(ConfigError::Value { key: key.into(), value: value.into(), reason: "must lie in [0, 1]".into() });
    }
    Ok(v)
}

fn positive<T: FromStr + PartialOrd + Default>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    let v: T = parse(key, value)?;
    if v <= T::default() {
        return Err(ConfigError::Value { key: key.into(), value: value.into(), reason: "must be positive".into() });
    }
    Ok(v)
}

impl PipelineConfig {
    /// Parses config text over the defaults. Blank lines and `#` comments are
    /// ignored; later assignments win.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "theta_o" => self.theta_o = ratio(key, value)?,
            "gamma_o" => self.gamma_o = ratio(key, value)?,
            "n_t" => self.n_t = ratio(key, value)?,
            "grid_coarse" => self.grid_coarse = positive(key, value)?,
            "grid_fine" => self.grid_fine = positive(key, value)?,
            "delta" => self.delta = ratio(key, value)?,
            "tau" => self.tau = ratio(key, value)?,
            "top_k" => self.top_k = positive(key, value)?,
            "merge_threshold" => self.merge_threshold = ratio(key, value)?,
            "containment_gamma" => self.containment_gamma = ratio(key, value)?,
            "merge_cover" => self.merge_cover = ratio(key, value)?,
            "rho" => self.rho = ratio(key, value)?,
            "coverage_fraction" => self.coverage_fraction = ratio(key, value)?,
            "containment_frac" => self.containment_frac = ratio(key, value)?,
            "min_region_px" => self.min_region_px = parse(key, value)?,
            "min_gain_px" => self.min_gain_px = parse(key, value)?,
            "min_gain_frac" => self.min_gain_frac = ratio(key, value)?,
            "usr_min_score" => self.usr_min_score = ratio(key, value)?,
            "sp_scale" => self.sp_scale = positive(key, value)?,
            "sp_sigma" => self.sp_sigma = parse(key, value)?,
            "sp_min_size" => {
                self.sp_min_size = if value == "auto" { None } else { Some(positive(key, value)?) }
            }
            "provider" => self.provider = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn superpixel_params(&self, height: u32, width: u32) -> FelzenszwalbParams {
        let auto = FelzenszwalbParams::for_image(height, width);
        FelzenszwalbParams {
            scale: self.sp_scale,
            sigma: self.sp_sigma,
            min_size: self.sp_min_size.unwrap_or(auto.min_size),
        }
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "theta_o" => self.theta_o.to_string(),
            "gamma_o" => self.gamma_o.to_string(),
            "n_t" => self.n_t.to_string(),
            "grid_coarse" => self.grid_coarse.to_string(),
            "grid_fine" => self.grid_fine.to_string(),
            "delta" => self.delta.to_string(),
            "tau" => self.tau.to_string(),
            "top_k" => self.top_k.to_string(),
            "merge_threshold" => self.merge_threshold.to_string(),
            "containment_gamma" => self.containment_gamma.to_string(),
            "merge_cover" => self.merge_cover.to_string(),
            "rho" => self.rho.to_string(),
            "coverage_fraction" => self.coverage_fraction.to_string(),
            "containment_frac" => self.containment_frac.to_string(),
            "min_region_px" => self.min_region_px.to_string(),
            "min_gain_px" => self.min_gain_px.to_string(),
            "min_gain_frac" => self.min_gain_frac.to_string(),
            "usr_min_score" => self.usr_min_score.to_string(),
            "sp_scale" => self.sp_scale.to_string(),
            "sp_sigma" => self.sp_sigma.to_string(),
            "sp_min_size" => self.sp_min_size.map_or("auto".into(), |v| v.to_string()),
            "provider" => self.provider.to_string(),
            "seed" => self.seed.to_string(),
            _ => unreachable!("key list is closed"),
        }
    }
}

impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in KEYS {
            writeln!(f, "{key} = {}", self.value_of(key))?;
        }
        Ok(())
    }
}
