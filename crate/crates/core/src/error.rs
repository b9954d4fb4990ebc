use std::path::PathBuf;

use thiserror::Error;

use crate::kinematics::Phase;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("cloud is in the {found:?} frame, expected {expected:?}")]
    FrameMismatch {
        expected: crate::geometry::Frame,
        found: crate::geometry::Frame,
    },
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("query ({x:.4}, {y:.4}) is outside the height map footprint")]
    OutOfRange { x: f64, y: f64 },
    #[error("drag length {length:.4} m reaches past the base projection ({distance:.4} m away)")]
    DegenerateDrag { length: f64, distance: f64 },
    #[error("pose unreachable during {phase:?}: wrist distance {distance:.4} m outside [{min:.4}, {max:.4}]")]
    Unreachable {
        phase: Option<Phase>,
        distance: f64,
        min: f64,
        max: f64,
    },
    #[error("joint limits violated on both elbow branches during {phase:?}")]
    JointLimit { phase: Option<Phase> },
    #[error("joint step {step:.4} rad exceeds limit during {phase:?}")]
    JointJump { phase: Phase, step: f64 },
    #[error("network spec error: {0}")]
    Spec(String),
    #[error("model is in {0} mode for an operation that requires the other mode")]
    Mode(&'static str),
    #[error("non-finite loss at sample {index}")]
    NonFiniteLoss { index: usize },
    #[error("dataset needs both classes, found {positives} positives and {negatives} negatives")]
    ClassImbalance { positives: usize, negatives: usize },
    #[error("no valid trajectory among the final candidates (best score {best_score:.4})")]
    PlannerFailure {
        best: crate::kinematics::TaskTrajectory,
        best_score: f64,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) | Error::InvalidSpec(_) | Error::Mode(_) => 2,
            Error::NonFiniteLoss { .. } | Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
