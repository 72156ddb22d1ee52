//! Experiment configuration file (JSON, `schema_version` 1).
//!
//! Relative paths in `data` and `output_dir` are resolved against the directory of
//! the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::LossConstraints;
use crate::cim_macro::MacroConfig;
use crate::harness::{Dataset, NetDescription};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub net: PathBuf,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Evaluate only the first `test_limit` test images.
    #[serde(default)]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    pub constraints: LossConstraints,
    /// Leading training images used as the calibration set.
    pub images: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            constraints: LossConstraints::default(),
            images: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(rename = "macro", default)]
    pub macro_cfg: MacroConfig,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    #[serde(default)]
    pub seed: u64,
    pub data: DataPaths,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, resolves paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in [
            &mut d.net,
            &mut d.train_images,
            &mut d.train_labels,
            &mut d.test_images,
            &mut d.test_labels,
        ] {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.macro_cfg.validate()?;
        let c = &self.calibration;
        if !c.constraints.targets.is_empty() {
            c.constraints.validate(self.macro_cfg.boundary_table.len())?;
        }
        if c.images == 0 {
            return Err(Error::Config("calibration.images must be > 0".into()));
        }
        if self.data.test_limit == Some(0) {
            return Err(Error::Config("data.test_limit must be > 0".into()));
        }
        Ok(())
    }

    pub fn load_net(&self) -> Result<NetDescription> {
        NetDescription::load(&self.data.net)
    }

    pub fn load_test(&self) -> Result<Dataset> {
        let d = Dataset::load(&self.data.test_images, &self.data.test_labels)?;
        Ok(match self.data.test_limit {
            Some(n) => d.take(n),
            None => d,
        })
    }

    pub fn load_calibration_set(&self) -> Result<Dataset> {
        Ok(Dataset::load(&self.data.train_images, &self.data.train_labels)?.take(self.calibration.images))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
