//! The JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynimg::DynImgConfig;
use crate::error::{Error, Result};
use crate::evalharness::{default_alpha_grid, Settings, SyntheticSpec, TrainConfig};
use crate::flow::FlowConfig;
use crate::losses::LossConfig;
use crate::msmmt::ModelConfig;
use crate::prep::{AugmentConfig, EvmConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Frame rate assumed for clips whose manifest entry and sidecar carry none.
    pub fps: f64,
    /// Label mapping file for named labels; the built-in composite map when absent.
    pub label_map: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            fps: 30.0,
            label_map: None,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    pub align: bool,
    /// Side of the square face crop.
    pub crop_size: usize,
    pub evm: EvmConfig,
    pub augment: AugmentConfig,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            align: true,
            crop_size: 64,
            evm: EvmConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub workers: usize,
    /// Test subject of a single-fold run.
    pub fold: Option<String>,
    pub alpha_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            workers: 4,
            fold: None,
            alpha_grid: default_alpha_grid(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub prep: PrepConfig,
    pub dynimg: DynImgConfig,
    pub flow: FlowConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.fps.is_finite() && d.fps > 0.0) {
            return Err(Error::Config(format!("data.fps must be positive, got {}", d.fps)));
        }
        d.synthetic.validate()?;
        if self.prep.crop_size < 8 {
            return Err(Error::Config("prep.crop_size must be at least 8".into()));
        }
        if self.prep.evm.enabled {
            let e = &self.prep.evm;
            if e.levels == 0 || !(e.band.0 > 0.0 && e.band.0 < e.band.1) || !(e.alpha >= 0.0) {
                return Err(Error::Config("prep.evm needs levels >= 1, 0 < lo < hi and alpha >= 0".into()));
            }
        }
        self.prep.augment.validate()?;
        self.dynimg.validate()?;
        self.flow.tvl1.validate()?;
        self.settings().validate()?;
        if self.eval.workers == 0 {
            return Err(Error::Config("eval.workers must be at least 1".into()));
        }
        if self.eval.alpha_grid.is_empty() || self.eval.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("eval.alpha_grid needs values in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn settings(&self) -> Settings {
        Settings {
            model: self.model.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
            seed: self.seed,
        }
    }
}
