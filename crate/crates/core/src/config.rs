//! Pipeline configuration: one JSON document, every field optional.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{Calendar, DayType, FragmentSpec, DEFAULT_FRAGMENT_SECS};
use crate::forecast::ForecastParams;
use crate::geo::PartitionParams;
use crate::pattern::PatternParams;
use crate::recon::{AltOptions, ObjectiveParams, PgOptions};
use crate::synth::SynthConfig;

/// Environment variable naming a config file.
pub const CONFIG_ENV: &str = "FLOWCAST_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    /// Bases from subspace clustering, coefficients fitted.
    #[default]
    Ibfp,
    /// Bases and coefficients learned jointly.
    Rbfp,
}

impl std::str::FromStr for FitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ibfp" => Ok(FitMode::Ibfp),
            "rbfp" => Ok(FitMode::Rbfp),
            other => Err(Error::Config(format!("unknown fit mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for FitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FitMode::Ibfp => "ibfp",
            FitMode::Rbfp => "rbfp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TensorConfig {
    pub fragment_secs: i64,
    pub utc_offset_secs: i32,
    pub day_type: Option<DayType>,
    pub window_start: Option<DateTime<Utc>>,
    pub window_end: Option<DateTime<Utc>>,
    /// Fragments starting before this instant are training data.
    pub train_end: Option<DateTime<Utc>>,
}

impl Default for TensorConfig {
    fn default() -> Self {
        TensorConfig {
            fragment_secs: DEFAULT_FRAGMENT_SECS,
            utc_offset_secs: 0,
            day_type: None,
            window_start: None,
            window_end: None,
            train_end: None,
        }
    }
}

impl TensorConfig {
    pub fn spec(&self, calendar: Calendar) -> FragmentSpec {
        FragmentSpec {
            duration_secs: self.fragment_secs,
            utc_offset_secs: self.utc_offset_secs,
            calendar,
            window: self.window_start.zip(self.window_end),
            day_type: self.day_type,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RbfpConfig {
    pub max_alternations: usize,
    pub tol: f64,
    pub basis_iters: usize,
    pub seed: u64,
}

impl Default for RbfpConfig {
    fn default() -> Self {
        let alt = AltOptions::default();
        RbfpConfig {
            max_alternations: alt.max_alternations,
            tol: alt.tol,
            basis_iters: alt.basis_iters,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub nonzero_only: bool,
    pub histogram_bin_m: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            nonzero_only: false,
            histogram_bin_m: 250.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub trips: Option<PathBuf>,
    pub calendar: Option<PathBuf>,
    pub regions: Option<PathBuf>,
    pub tensor: Option<PathBuf>,
    pub bases: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub forecast: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub partition: PartitionParams,
    /// Trip endpoints farther than this from every centroid are dropped; defaults to epsilon.
    pub assign_radius_m: Option<f64>,
    pub tensor: TensorConfig,
    pub patterns: PatternParams,
    pub objective: ObjectiveParams,
    pub pg: PgOptions,
    pub mode: FitMode,
    pub rbfp: RbfpConfig,
    pub forecast: ForecastParams,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The explicit file, else the one named by `FLOWCAST_CONFIG`, else defaults.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::from_path(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::from_path(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn assign_radius(&self) -> f64 {
        self.assign_radius_m.unwrap_or(self.partition.epsilon_m)
    }

    pub fn alt_options(&self) -> AltOptions {
        AltOptions {
            pg: self.pg,
            max_alternations: self.rbfp.max_alternations,
            tol: self.rbfp.tol,
            basis_iters: self.rbfp.basis_iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        if !(self.assign_radius() > 0.0 && self.assign_radius().is_finite()) {
            return Err(Error::Config("assign radius must be finite and > 0".into()));
        }
        if self.tensor.fragment_secs <= 0 || 86_400 % self.tensor.fragment_secs != 0 {
            return Err(Error::Config("fragment length must divide one day".into()));
        }
        if self.tensor.window_start.is_some() != self.tensor.window_end.is_some() {
            return Err(Error::Config("window_start and window_end go together".into()));
        }
        if let (Some(a), Some(b)) = (self.tensor.window_start, self.tensor.window_end) {
            if a >= b {
                return Err(Error::Config("window_start must precede window_end".into()));
            }
        }
        if self.patterns.c == 0 {
            return Err(Error::Config("c must be >= 1".into()));
        }
        self.objective.validate()?;
        self.forecast.validate()?;
        if self.rbfp.max_alternations == 0 || !(self.rbfp.tol >= 0.0) {
            return Err(Error::Config("rbfp limits must be positive".into()));
        }
        if !(self.eval.histogram_bin_m > 0.0) {
            return Err(Error::Config("histogram bin width must be > 0".into()));
        }
        self.synth.validate()
    }

    /// Short hash of every setting except file paths.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        let text = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
