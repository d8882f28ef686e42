use std::path::PathBuf;

use crate::calibration::CalibrationResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rotation is at the Euler pitch singularity (pitch = {pitch} rad)")]
    GimbalLock { pitch: f64 },

    #[error("point is behind the camera (depth {depth} m)")]
    BehindCamera { depth: f64 },

    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("joint state has {found} angles, model has {expected} links")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("parameter vector has length {found}, expected {expected}")]
    ParameterLength { expected: usize, found: usize },

    #[error("invalid kinematic model: {0}")]
    InvalidModel(String),

    #[error("invalid fiducial target: {0}")]
    InvalidTarget(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("pose estimate did not converge (rms {rms_px:.3} px)")]
    PnpNotConverged { rms_px: f64 },

    #[error("only {common} target points are observed by both cameras, need {required}")]
    InsufficientOverlap { common: usize, required: usize },

    #[error("observation references unknown point id {0}")]
    UnknownPointId(usize),

    #[error("non-finite residual at iteration {iteration}")]
    NonFiniteResidual { iteration: usize, params: Vec<f64> },

    #[error("non-finite function value while differentiating parameter {param}")]
    NonFiniteEvaluation { param: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("measurement set {set} has no encoder angles")]
    MissingEncoderAngles { set: usize },

    #[error("calibration did not converge after {} iterations", .0.report.iterations)]
    CalibrationNotConverged(Box<CalibrationResult>),

    #[error("solver did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("all {rejected} sampled configurations were rejected")]
    AllSetsRejected { rejected: usize },

    #[error(
        "insufficient observations: {static_obs} static (need {required_static}), \
         {dynamic_obs} dynamic (need {required_dynamic})"
    )]
    InsufficientObservations {
        static_obs: usize,
        dynamic_obs: usize,
        required_static: usize,
        required_dynamic: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
