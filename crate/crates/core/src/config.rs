//! Run configuration: a JSON document tying together model architecture,
//! training hyperparameters, and the data source.

use std::path::Path;

use crate::model::ModelConfig;
use crate::oracle::ShapeOracle;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// Training/reconstruction data source.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSpec {
    /// Named analytic oracle preset (e.g. "sphere").
    OracleName(String),
    /// Inline oracle description.
    Oracle(ShapeOracle),
    /// Path to a DPTC point-cloud file (reconstruction only; no analytic
    /// occupancy is available for training from raw scans).
    Dptc(String),
}

impl DataSpec {
    pub fn oracle(&self) -> Result<ShapeOracle> {
        match self {
            DataSpec::OracleName(name) => ShapeOracle::preset(name),
            DataSpec::Oracle(o) => Ok(o.clone()),
            DataSpec::Dptc(p) => Err(Error::invalid(format!(
                "data source `{p}` is a point-cloud file; training needs an analytic oracle"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub output_dir: String,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.output_dir.is_empty() {
            return Err(Error::invalid("config: empty output_dir"));
        }
        if let DataSpec::OracleName(name) = &self.data {
            ShapeOracle::preset(name)?;
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
