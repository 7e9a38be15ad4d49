use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient correspondences: need at least 3, got {0}")]
    InsufficientCorrespondences(usize),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("no admissible transform: every candidate failed the up-vector check")]
    NoAdmissibleTransform,
    #[error("cloud has no normals; run estimate_normals first")]
    MissingNormals,
    #[error("cloud has no curvature; run estimate_normals first")]
    MissingCurvature,
    #[error("empty input: {0}")]
    Empty(String),
    #[error("pose graph is disconnected; unreachable sensors: {0:?}")]
    DisconnectedGraph(Vec<usize>),
    #[error("world alignment underdetermined: sensor positions are collinear")]
    AlignmentUnderdetermined,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
