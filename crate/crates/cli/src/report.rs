//! Report documents written by the command-line tool.

use std::collections::BTreeMap;

use mirrorpose::geometry::{MirrorPlane, VirtualExtrinsics};
use mirrorpose::pipeline::{pose_errors, CalibrationOutcome, PoseErrors, Stage};
use mirrorpose::pose::AssignmentInfo;
use mirrorpose::refiner::{StopReason, TraceEntry};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SCALE_NOTE: &str = "t is unit-norm; the mirror distance d = |t|/2 is in the same units";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    #[serde(flatten)]
    pub extrinsics: VirtualExtrinsics<f64>,
    pub mirror: MirrorPlane<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errors: Option<PoseErrors>,
}

impl StageReport {
    pub fn new(ext: &VirtualExtrinsics<f64>, truth: Option<&VirtualExtrinsics<f64>>) -> CliResult<Self> {
        let extrinsics = ext.with_unit_translation()?;
        let mirror = extrinsics.mirror_plane()?;
        let errors = truth.map(|gt| pose_errors(&extrinsics, gt)).transpose()?;
        Ok(Self { extrinsics, mirror, errors })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub frames: usize,
    pub pairs: usize,
    pub min_confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<AssignmentInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlierStats {
    pub pairs: usize,
    pub inliers: usize,
    pub inlier_fraction: f64,
    pub threshold: f64,
    /// Mean epipolar distance of the inliers under the winning sample model.
    pub mean_inlier_distance: f64,
    pub best_iteration: usize,
    pub refit_accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub outer_iterations: usize,
    pub stop: StopReason,
    pub objective_trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub scale_note: String,
    /// Final estimate, repeated from `stages.final`.
    #[serde(flatten)]
    pub extrinsics: VirtualExtrinsics<f64>,
    pub mirror: MirrorPlane<f64>,
    pub input: InputSummary,
    pub stages: BTreeMap<Stage, StageReport>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failures: BTreeMap<Stage, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine: Option<RefineSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ransac: Option<InlierStats>,
}

impl CalibrationReport {
    pub fn from_outcome(
        outcome: &CalibrationOutcome<f64>,
        config_hash: String,
        input: InputSummary,
        threshold: f64,
        truth: Option<&VirtualExtrinsics<f64>>,
    ) -> CliResult<Self> {
        let mut stages = BTreeMap::new();
        let mut failures = BTreeMap::new();
        for stage in [Stage::Init, Stage::Refine, Stage::Final] {
            if let Some(e) = outcome.extrinsics(stage) {
                stages.insert(stage, StageReport::new(&e, truth)?);
            }
        }
        for (stage, r) in [(Stage::Baseline1, &outcome.baseline1), (Stage::Baseline2, &outcome.baseline2)] {
            match r {
                Some(Ok(e)) => {
                    stages.insert(stage, StageReport::new(e, truth)?);
                }
                Some(Err(e)) => {
                    failures.insert(stage, e.to_string());
                }
                None => {}
            }
        }
        let fin = stages[&Stage::Final].clone();
        let refine = outcome.refine.as_ref().map(|r| RefineSummary {
            outer_iterations: r.outer_iterations,
            stop: r.stop,
            objective_trace: r.trace.clone(),
        });
        let ransac = outcome.ransac.as_ref().map(|s| {
            let r = &s.result;
            let sum: f64 = r.inliers.iter().map(|&i| r.distances[i]).sum();
            InlierStats {
                pairs: s.pair_count,
                inliers: r.inliers.len(),
                inlier_fraction: r.inliers.len() as f64 / s.pair_count as f64,
                threshold,
                mean_inlier_distance: sum / r.inliers.len() as f64,
                best_iteration: r.best_iteration,
                refit_accepted: r.refit_accepted,
            }
        });
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            config_hash,
            scale_note: SCALE_NOTE.to_string(),
            extrinsics: fin.extrinsics,
            mirror: fin.mirror,
            input,
            stages,
            failures,
            refine,
            ransac,
        })
    }

    pub fn from_json(s: &str) -> CliResult<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| mirrorpose::Error::MalformedDocument(e.to_string()))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(CliError::Core(mirrorpose::Error::MalformedDocument(format!(
                "unsupported schema_version {}",
                r.schema_version
            ))));
        }
        Ok(r)
    }

    pub fn stage(&self, stage: Stage) -> CliResult<&StageReport> {
        self.stages.get(&stage).ok_or_else(|| {
            let why = self.failures.get(&stage).map(|f| format!(" ({f})")).unwrap_or_default();
            CliError::Config(format!("report has no {} stage{why}", stage.name()))
        })
    }
}
