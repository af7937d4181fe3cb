//! TOML configuration file. Every section and key is optional; missing
//! values take the library defaults.

use std::path::Path;

use mirrorpose::body_prior::{AnthropometricTable, LossWeights, VariationMode};
use mirrorpose::pipeline::CalibrationConfig;
use mirrorpose::ransac::RansacConfig;
use mirrorpose::refiner::{CameraUpdate, RefineConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::io::read_string;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub min_confidence: f64,
    pub skip_refine: bool,
    pub skip_ransac: bool,
    pub baseline1: bool,
    pub baseline2: bool,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let c = CalibrationConfig::default();
        Self {
            min_confidence: c.min_confidence,
            skip_refine: c.skip_refine,
            skip_ransac: c.skip_ransac,
            baseline1: c.baseline1,
            baseline2: c.baseline2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub max_outer_iterations: usize,
    pub quasi_newton_max_steps_per_outer: usize,
    pub step_length: f64,
    pub convergence_tol: f64,
    pub camera_update: CameraUpdate,
    pub gm_scale: f64,
    pub variation: VariationMode,
}

impl Default for RefineSection {
    fn default() -> Self {
        let r = RefineConfig::default();
        Self {
            max_outer_iterations: r.max_outer_iterations,
            quasi_newton_max_steps_per_outer: r.quasi_newton_max_steps_per_outer,
            step_length: r.step_length,
            convergence_tol: r.convergence_tol,
            camera_update: r.camera_update,
            gm_scale: r.prior.gm_scale,
            variation: r.prior.variation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub pipeline: PipelineSection,
    pub weights: LossWeights,
    pub anthropometry: AnthropometricTable,
    pub refine: RefineSection,
    pub ransac: RansacConfig,
}

impl FileConfig {
    pub fn from_toml(s: &str) -> CliResult<Self> {
        toml::from_str(s).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_toml(&read_string(path)?)
    }

    /// Checks every section against its module's invariants.
    pub fn calibration(&self) -> CliResult<CalibrationConfig> {
        let mut refine = RefineConfig {
            max_outer_iterations: self.refine.max_outer_iterations,
            quasi_newton_max_steps_per_outer: self.refine.quasi_newton_max_steps_per_outer,
            step_length: self.refine.step_length,
            convergence_tol: self.refine.convergence_tol,
            camera_update: self.refine.camera_update,
            ..RefineConfig::default()
        };
        refine.prior.weights = self.weights;
        refine.prior.table = self.anthropometry;
        refine.prior.gm_scale = self.refine.gm_scale;
        refine.prior.variation = self.refine.variation;
        let cfg = CalibrationConfig {
            min_confidence: self.pipeline.min_confidence,
            refine,
            ransac: self.ransac,
            skip_refine: self.pipeline.skip_refine,
            skip_ransac: self.pipeline.skip_ransac,
            baseline1: self.pipeline.baseline1,
            baseline2: self.pipeline.baseline2,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// SHA-256 of the canonical JSON form of the effective configuration.
pub fn config_hash(cfg: &CalibrationConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}
