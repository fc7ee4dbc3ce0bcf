//! JSON experiment documents and their stable hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimates::{FluxGenerator, RhsFamily};
use crate::fem::{AssemblyOptions, SolverConfig, MESH_PER_PERIOD};
use crate::geometry::{GeometryError, Point, PolygonDomain};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// A library domain by name or a JSON file holding a list of `[x, y]` vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainSource {
    Name(String),
    File { vertex_file: PathBuf },
}

impl DomainSource {
    pub fn load(&self) -> Result<PolygonDomain, ConfigError> {
        match self {
            DomainSource::Name(n) => Ok(PolygonDomain::by_name(n)?),
            DomainSource::File { vertex_file } => {
                let text = std::fs::read_to_string(vertex_file).map_err(|source| ConfigError::Read {
                    path: vertex_file.clone(),
                    source,
                })?;
                let vertices: Vec<Point> = serde_json::from_str(&text)?;
                let name = vertex_file
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "custom".into());
                Ok(PolygonDomain::new(name, vertices)?)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightChoice {
    /// `dist^sigma` for every sigma in the ladder.
    Distance,
    /// `w = 1`; the sigma ladder is ignored.
    Constant,
}

fn default_weight() -> WeightChoice {
    WeightChoice::Distance
}
fn default_trials() -> usize {
    20
}
fn default_seed() -> u64 {
    42
}
fn default_generator() -> FluxGenerator {
    FluxGenerator::Trig
}
fn default_per_period() -> f64 {
    MESH_PER_PERIOD
}
fn default_tol() -> f64 {
    SolverConfig::default().tol
}
fn default_max_iter() -> usize {
    SolverConfig::default().max_iter
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: DomainSource,
    pub coef: String,
    pub eps: Vec<f64>,
    #[serde(default)]
    pub sigma: Vec<f64>,
    #[serde(default = "default_weight")]
    pub weight: WeightChoice,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_generator")]
    pub generator: FluxGenerator,
    /// Mesh rule `h = eps / per_period`.
    #[serde(default = "default_per_period")]
    pub per_period: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub allow_coarse: bool,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.eps.is_empty() || self.eps.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(ConfigError::Invalid("eps ladder must be nonempty and positive".into()));
        }
        if self.trials == 0 {
            return Err(ConfigError::Invalid("trials must be positive".into()));
        }
        if !(self.per_period > 0.0 && self.tol > 0.0 && self.max_iter > 0) {
            return Err(ConfigError::Invalid("mesh rule and tolerances must be positive".into()));
        }
        if self.sigma.iter().any(|s| !s.is_finite()) {
            return Err(ConfigError::Invalid("sigma must be finite".into()));
        }
        Ok(())
    }

    /// The sigma ladder actually swept: `[0]` for the constant weight.
    pub fn sigmas(&self) -> Vec<f64> {
        match self.weight {
            WeightChoice::Constant => vec![0.0],
            WeightChoice::Distance if self.sigma.is_empty() => vec![0.0],
            WeightChoice::Distance => self.sigma.clone(),
        }
    }

    pub fn family(&self) -> RhsFamily {
        RhsFamily {
            count: self.trials,
            seed: self.seed,
            generator: self.generator,
        }
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }

    pub fn assembly(&self) -> AssemblyOptions {
        AssemblyOptions {
            allow_coarse: self.allow_coarse,
        }
    }

    /// Sorted-key JSON with all defaults filled in.
    pub fn canonical_json(&self) -> String {
        // serde_json maps are ordered by key
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// Hex SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn hash(&self) -> String {
        hash_str(&self.canonical_json())
    }
}

pub fn hash_str(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
