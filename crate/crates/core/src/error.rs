use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate polygon")]
    DegeneratePolygon,
    #[error("polygon is not simple")]
    NonSimplePolygon,
    #[error("out of bounds")]
    OutOfBounds,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("not an operator")]
    NotAnOperator,
    #[error("grasp alignment failed")]
    GraspAlignmentFailed,
    #[error("unknown object {0}")]
    UnknownObject(u32),
    #[error("an object is already attached")]
    AlreadyAttached,

    #[error("filter divergence")]
    FilterDivergence,

    #[error("insufficient contour")]
    InsufficientContour,
    #[error("contour has {0} points, at most 12 supported")]
    ContourTooLong(usize),
    #[error("pose outlier (rms residual {0:.3} m)")]
    PoseOutlier(f64),

    #[error("start cell is blocked")]
    StartBlocked,
    #[error("goal unreachable")]
    GoalUnreachable,

    #[error("alignment timeout")]
    AlignmentTimeout,
    #[error("layout complete")]
    LayoutComplete,
    #[error("placement verification failed: {translation:.3} m, {angle_deg:.2} deg")]
    PlacementVerificationFailed { translation: f64, angle_deg: f64 },
    #[error("chair task failed")]
    ChairTaskFailed,
    #[error("illegal phase transition {from} -> {to}")]
    IllegalTransition { from: &'static str, to: &'static str },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("trace format: {0}")]
    Trace(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
