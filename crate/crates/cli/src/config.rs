//! Strict JSON run configuration.

use std::path::{Path, PathBuf};

use mdgmm::md_estimator::{
    BasisChoice, BasisPreset, GammaChoice, GammaPreset, GroupWeights, OracleSpec,
};
use mdgmm::moments::DEFAULT_RANK_TOL;
use mdgmm::simlab::{preset, EstimatorTag, ScenarioConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Md,
    MdAlt,
    Gmm,
    Tsls,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Md => "md",
            Method::MdAlt => "md_alt",
            Method::Gmm => "gmm",
            Method::Tsls => "tsls",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightChoice {
    #[default]
    Unit,
    GroupSize,
    /// Per-group weights from the `weight` column of the units file.
    Column,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    #[serde(default = "default_gamma")]
    pub gamma: GammaChoice,
    #[serde(default = "default_b0")]
    pub b0: BasisChoice,
    #[serde(default)]
    pub weights: WeightChoice,
}

fn default_gamma() -> GammaChoice {
    GammaChoice::Preset(GammaPreset::Intercept)
}

fn default_b0() -> BasisChoice {
    BasisChoice::Preset(BasisPreset::Effect)
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            b0: default_b0(),
            weights: WeightChoice::Unit,
        }
    }
}

impl DesignConfig {
    pub fn spec(&self, k: usize, p: usize, column_weights: Option<&[f64]>) -> Result<OracleSpec> {
        let spec = OracleSpec::from_choices(k, p, &self.gamma, &self.b0)?;
        let weights = match (self.weights, column_weights) {
            (WeightChoice::Unit, None) => GroupWeights::Unit,
            (WeightChoice::GroupSize, None) => GroupWeights::GroupSize,
            (WeightChoice::Column, Some(w)) => GroupWeights::Explicit(w.to_vec()),
            (WeightChoice::Column, None) => {
                return Err(CliError::Config(
                    "design.weights is \"column\" but the units file has no weight column".into(),
                ))
            }
            (_, Some(_)) => return Err(CliError::Config(
                "the units file has a weight column; set design.weights to \"column\" to use it"
                    .into(),
            )),
        };
        Ok(spec.with_weights(weights))
    }
}

/// Input files; relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub units: PathBuf,
    pub policies: PathBuf,
    #[serde(default)]
    pub auxiliary: Option<PathBuf>,
}

/// A shipped scenario by name or a full scenario definition.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ScenarioChoice {
    Preset(String),
    Custom(Box<ScenarioConfig>),
}

impl<'de> Deserialize<'de> for ScenarioChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        // dispatch by hand so errors inside an inline scenario keep their detail
        let value = serde_json::Value::deserialize(d)?;
        match value {
            serde_json::Value::String(name) => Ok(ScenarioChoice::Preset(name)),
            other => serde_json::from_value(other)
                .map(|cfg| ScenarioChoice::Custom(Box::new(cfg)))
                .map_err(|e| serde::de::Error::custom(format!("scenario: {e}"))),
        }
    }
}

impl ScenarioChoice {
    pub fn resolve(&self) -> Result<ScenarioConfig> {
        let cfg = match self {
            ScenarioChoice::Preset(name) => preset(name)?,
            ScenarioChoice::Custom(cfg) => {
                cfg.validate()?;
                (**cfg).clone()
            }
        };
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub method: Option<Method>,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub data: Option<DataPaths>,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub replications: Option<usize>,
    #[serde(default)]
    pub scenario: Option<ScenarioChoice>,
    #[serde(default)]
    pub estimators: Option<Vec<EstimatorTag>>,
    /// Include the per-group table in reports.
    #[serde(default = "default_true")]
    pub per_group: bool,
}

fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        if !(cfg.rank_tol > 0.0 && cfg.rank_tol < 1.0) {
            return Err(CliError::Config(format!(
                "{origin}: rank_tol must lie in (0, 1)"
            )));
        }
        Ok(cfg)
    }

    /// Reads a config file and resolves data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        if let (Some(data), Some(base)) = (cfg.data.as_mut(), path.parent()) {
            for p in [
                Some(&mut data.units),
                Some(&mut data.policies),
                data.auxiliary.as_mut(),
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn require_method(&self) -> Result<Method> {
        self.method.ok_or_else(|| {
            CliError::Config("`method` is required: one of md, md_alt, gmm, tsls".into())
        })
    }

    pub fn require_data(&self) -> Result<&DataPaths> {
        self.data.as_ref().ok_or_else(|| {
            CliError::Config("`data` with `units` and `policies` paths is required".into())
        })
    }
}
