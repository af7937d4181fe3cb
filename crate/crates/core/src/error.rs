use thiserror::Error;

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration or malformed input data.
    Input,
    /// The data does not determine the geometry (degenerate configuration).
    Degenerate,
    /// A numerical routine produced a non-finite or otherwise unusable value.
    Numerical,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("intrinsics are singular (fx = {fx}, fy = {fy})")]
    SingularIntrinsics { fx: f64, fy: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid mirror plane: {0}")]
    InvalidMirror(String),
    #[error("point has non-positive depth ({depth}) in the projecting camera")]
    BehindCamera { depth: f64 },
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("point cloud is degenerate (all points coincide or are collinear)")]
    DegenerateCloud,
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("reflective essential matrix is zero")]
    ZeroEssential,
    #[error("no correspondence triangulates in front of both cameras")]
    CheiralityUndecidable,
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("unsupported keypoint count {0} (expected 25 or 18 keypoints)")]
    UnsupportedKeypointCount(usize),
    #[error("real/mirror assignment is ambiguous (residuals {first} vs {second})")]
    AmbiguousAssignment { first: f64, second: f64 },
    #[error("expected exactly 2 tracked people, found {0}")]
    TrackCountMismatch(usize),
    #[error("joint {0} is not eligible for calibration")]
    IneligibleJoint(String),
    #[error("no usable correspondences")]
    EmptyCorrespondenceSet,
    #[error("joint {joint} missing in frame {frame}")]
    MissingJoint { joint: String, frame: usize },
    #[error("bone {0} has zero mean length")]
    ZeroMeanLength(String),
    #[error("femur length is zero in frame {0}")]
    ZeroFemur(usize),
    #[error("need at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("objective became non-finite during refinement")]
    DivergedObjective,
    #[error("epipolar line is degenerate (both direction coefficients are zero)")]
    DegenerateEpipolarLine,
    #[error("ransac found no non-degenerate model")]
    NoModelFound,
    #[error("best ransac model has only {0} inliers")]
    InsufficientInliers(usize),
    #[error("triangulation system is rank deficient (rays are parallel)")]
    RankDeficientSystem,
    #[error("matrix is not a proper rotation")]
    NotARotation,
    #[error("translation vector is zero")]
    ZeroTranslation,
    #[error("could not place the subject inside both views after {0} attempts")]
    PlacementFailed(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("incompatible scales: {0}")]
    ScaleMismatch(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            InvalidIntrinsics(_)
            | InvalidMirror(_)
            | MalformedDocument(_)
            | UnsupportedKeypointCount(_)
            | TrackCountMismatch(_)
            | IneligibleJoint(_)
            | TooFewPairs { .. }
            | TooFewFrames { .. }
            | EmptyCorrespondenceSet
            | MissingJoint { .. }
            | InvalidConfig(_)
            | ScaleMismatch(_)
            | Io(_) => ErrorClass::Input,
            DivergedObjective => ErrorClass::Numerical,
            _ => ErrorClass::Degenerate,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
