//! Run configuration: one JSON document holding every tunable the command
//! line accepts, mirrored by the schema published at
//! `docs/run_config.schema.json`.
//!
//! Unknown keys are rejected at every level and all fields have defaults, so
//! a config file only needs to spell out what it changes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::fit::OptimConfig;
use crate::hand::{load_bundle, make_toy_model, HandModelData};
use crate::loss::LossWeights;
use crate::metrics::{threshold_grid, Alignment};
use crate::net::NetConfig;

/// Seed of the procedural hand model used whenever no bundle path is given.
pub const TOY_MODEL_SEED: u64 = 0;

/// Evenly spaced threshold grid, `points` values from `start` to `end`
/// inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub start: f64,
    pub end: f64,
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { start: 0.0, end: 30.0, points: 31 }
    }
}

impl GridSpec {
    pub fn thresholds(&self) -> Result<Vec<f64>> {
        threshold_grid(self.start, self.end, self.points)
    }
}

/// Threshold grids and mesh alignment used by evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Keypoint error grid in pixels.
    pub grid_2d_px: GridSpec,
    /// Per-vertex error grid in millimeters.
    pub grid_3d_mm: GridSpec,
    pub alignment: Alignment,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            grid_2d_px: GridSpec { start: 0.0, end: 30.0, points: 31 },
            grid_3d_mm: GridSpec { start: 0.0, end: 50.0, points: 51 },
            alignment: Alignment::default(),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid_2d_px.thresholds()?;
        self.grid_3d_mm.thresholds()?;
        Ok(())
    }
}

/// Everything a workbench command can be configured with.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Hand model bundle directory; the built-in toy model when absent.
    pub model: Option<PathBuf>,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub net: NetConfig,
    pub metrics: MetricConfig,
}

impl RunConfig {
    /// Every section checks its own invariants. Cross-section consistency
    /// (network dims vs dataset dims) is checked by the command that needs
    /// it, so a config used only for synthesis never trips over net fields.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.weights.validate()?;
        self.optim.validate()?;
        self.net.validate()?;
        self.metrics.validate()?;
        Ok(())
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Resolves the hand model: the configured bundle, or the toy model.
    pub fn model(&self) -> Result<HandModelData> {
        match &self.model {
            Some(dir) => load_bundle(dir),
            None => Ok(make_toy_model(TOY_MODEL_SEED)),
        }
    }

    /// The network must consume exactly what the dataset records hold.
    /// `data` is the config of the dataset actually trained on, which for an
    /// existing directory comes from its manifest, not from `self.dataset`.
    pub fn validate_for_training(&self, data: &DatasetConfig) -> Result<()> {
        self.validate()?;
        let n = &self.net;
        let skeleton = crate::encodings::SkeletonHierarchy::hand();
        let pairs = [
            ("net.input_width", n.input_width, "dataset.image_width", data.image_width),
            ("net.input_height", n.input_height, "dataset.image_height", data.image_height),
            ("net.map_width", n.map_width, "dataset.map_width", data.map_width),
            ("net.map_height", n.map_height, "dataset.map_height", data.map_height),
            ("net.keypoints", n.keypoints, "record keypoints", skeleton.keypoints),
            ("net.pof_channels", n.pof_channels, "record pof channels", 3 * skeleton.bones.len()),
        ];
        for (na, a, nb, b) in pairs {
            if a != b {
                return Err(Error::Config(format!("{na} = {a} but {nb} = {b}")));
            }
        }
        Ok(())
    }
}
