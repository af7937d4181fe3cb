//! End-to-end calibration: constrained initial estimate, joint refinement,
//! RANSAC and the final estimate on the inliers, plus the two baselines.

use serde::{Deserialize, Serialize};

use crate::baseline::estimate_unconstrained;
use crate::eight_point::{essential_from_fundamental, estimate_mirror, extract_mirror, CheiralityCheck, CorrespondenceSet, MirrorEstimate};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, MirrorPlane, VirtualExtrinsics};
use crate::metrics::{rotation_error, translation_direction_error, translation_error};
use crate::pose::{to_joint_tracks, PoseSequencePair, DEFAULT_MIN_CONFIDENCE};
use crate::ransac::{ransac_fundamental, RansacConfig, RansacResult};
use crate::refiner::{refine_joints, CameraUpdate, RefineConfig, RefineResult};
use crate::scalar::Scalar;
use crate::tracks::JointTracks;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub min_confidence: f64,
    pub refine: RefineConfig,
    pub ransac: RansacConfig,
    pub skip_refine: bool,
    pub skip_ransac: bool,
    pub baseline1: bool,
    pub baseline2: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            min_confidence: DEFAULT_MIN_CONFIDENCE,
            refine: RefineConfig::default(),
            ransac: RansacConfig::default(),
            skip_refine: false,
            skip_ransac: false,
            baseline1: true,
            baseline2: false,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::InvalidConfig("min_confidence must lie in [0, 1]".into()));
        }
        self.refine.validate()?;
        self.ransac.validate()
    }
}

/// Pipeline stage, used for error attribution and report keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Init,
    Refine,
    Ransac,
    Final,
    Baseline1,
    Baseline2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Init => "init",
            Stage::Refine => "refine",
            Stage::Ransac => "ransac",
            Stage::Final => "final",
            Stage::Baseline1 => "baseline1",
            Stage::Baseline2 => "baseline2",
        }
    }
}

/// An error tagged with the stage that raised it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{} stage failed: {source}", stage.name())]
pub struct StageError {
    pub stage: Stage,
    pub source: Error,
}

fn at(stage: Stage) -> impl FnOnce(Error) -> StageError {
    move |source| StageError { stage, source }
}

#[derive(Debug, Clone)]
pub struct RansacStage<T: Scalar> {
    pub result: RansacResult<T>,
    pub pair_count: usize,
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome<T: Scalar> {
    pub observed: JointTracks<T>,
    pub init: MirrorEstimate<T>,
    pub refine: Option<RefineResult<T>>,
    pub ransac: Option<RansacStage<T>>,
    pub final_extrinsics: VirtualExtrinsics<T>,
    pub baseline1: Option<std::result::Result<VirtualExtrinsics<T>, Error>>,
    pub baseline2: Option<std::result::Result<VirtualExtrinsics<T>, Error>>,
}

impl<T: Scalar> CalibrationOutcome<T> {
    /// Extrinsics produced by `stage`, if it ran and succeeded.
    pub fn extrinsics(&self, stage: Stage) -> Option<VirtualExtrinsics<T>> {
        match stage {
            Stage::Ingest => None,
            Stage::Init => Some(self.init.extrinsics),
            Stage::Refine => self.refine.as_ref().map(|r| r.extrinsics),
            Stage::Ransac | Stage::Final => Some(self.final_extrinsics),
            Stage::Baseline1 => self.baseline1.as_ref().and_then(|r| r.as_ref().ok().copied()),
            Stage::Baseline2 => self.baseline2.as_ref().and_then(|r| r.as_ref().ok().copied()),
        }
    }
}

/// RANSAC over `tracks`, then the final estimate on the inliers.
fn robust_stage<T: Scalar>(
    tracks: &JointTracks<T>,
    k: &Intrinsics<T>,
    cfg: &RansacConfig,
) -> Result<(RansacStage<T>, VirtualExtrinsics<T>)> {
    let corr = CorrespondenceSet::from_tracks(tracks)?;
    let result = ransac_fundamental(&corr, cfg)?;
    let inliers = corr.subset(&result.inliers)?;
    let e = essential_from_fundamental(&result.fundamental, k)?;
    let (_, ext) = extract_mirror(&e, Some(CheiralityCheck { intrinsics: k, pairs: inliers.pairs() }))?;
    Ok((RansacStage { result, pair_count: corr.len() }, ext))
}

/// Runs every enabled stage on `observed`. Optional baselines never abort
/// the run; their failures are kept in the outcome.
pub fn calibrate_tracks<T: Scalar>(
    observed: &JointTracks<T>,
    k: &Intrinsics<T>,
    cfg: &CalibrationConfig,
) -> std::result::Result<CalibrationOutcome<T>, StageError> {
    cfg.validate().map_err(at(Stage::Ingest))?;
    let corr = CorrespondenceSet::from_tracks(observed).map_err(at(Stage::Ingest))?;
    let init = estimate_mirror(&corr, k).map_err(at(Stage::Init))?;
    let baseline1 = cfg.baseline1.then(|| estimate_unconstrained(&corr, k));

    let refine = if cfg.skip_refine {
        None
    } else {
        Some(refine_joints(observed, k, &init.extrinsics, &cfg.refine).map_err(at(Stage::Refine))?)
    };
    let (current_tracks, current_ext) = match &refine {
        Some(r) => (&r.refined, r.extrinsics),
        None => (observed, init.extrinsics),
    };
    let (ransac, final_extrinsics) = if cfg.skip_ransac {
        (None, current_ext)
    } else {
        let (s, e) = robust_stage(current_tracks, k, &cfg.ransac).map_err(at(Stage::Ransac))?;
        (Some(s), e)
    };

    let baseline2 = cfg.baseline2.then(|| {
        let rc = RefineConfig { camera_update: CameraUpdate::FinalOnly, ..cfg.refine };
        let r = refine_joints(observed, k, &init.extrinsics, &rc)?;
        if cfg.skip_ransac {
            Ok(r.extrinsics)
        } else {
            robust_stage(&r.refined, k, &cfg.ransac).map(|(_, e)| e)
        }
    });

    Ok(CalibrationOutcome {
        observed: observed.clone(),
        init,
        refine,
        ransac,
        final_extrinsics,
        baseline1,
        baseline2,
    })
}

pub fn calibrate(
    pair: &PoseSequencePair,
    k: &Intrinsics<f64>,
    cfg: &CalibrationConfig,
) -> std::result::Result<CalibrationOutcome<f64>, StageError> {
    k.validate().map_err(at(Stage::Ingest))?;
    let observed = to_joint_tracks(pair, cfg.min_confidence);
    calibrate_tracks(&observed, k, cfg)
}

/// Errors of one estimate against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    /// Degrees.
    pub rotation: f64,
    /// After rescaling the estimate to the ground-truth norm, scene units.
    pub translation: f64,
    pub translation_direction: f64,
    /// Angle between mirror normals, degrees.
    pub normal: f64,
}

pub fn pose_errors(est: &VirtualExtrinsics<f64>, gt: &VirtualExtrinsics<f64>) -> Result<PoseErrors> {
    let mirror = |e: &VirtualExtrinsics<f64>| -> Result<MirrorPlane<f64>> { e.mirror_plane() };
    let (a, b) = (mirror(est)?, mirror(gt)?);
    let normal = a.normal().dot(b.normal()).clamp(-1.0, 1.0).acos().to_degrees();
    Ok(PoseErrors {
        rotation: rotation_error(&est.rotation, &gt.rotation)?,
        translation: translation_error(&est.translation, &gt.translation)?,
        translation_direction: translation_direction_error(&est.translation, &gt.translation)?,
        normal,
    })
}
