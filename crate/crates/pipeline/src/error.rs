use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] lidarfuse_core::Error),
    #[error("sensor {0} delivered no frames")]
    EmptyStream(usize),
    #[error("timestamps of sensor {0} decrease")]
    NonMonotone(usize),
    #[error("initial registration failed: unreachable sensors {unreachable:?}; pairs without a transform {failed:?}")]
    InitialRegistration {
        failed: Vec<(usize, usize)>,
        unreachable: Vec<usize>,
    },
    #[error("first frame is missing sensor {0}")]
    IncompleteFirstFrame(usize),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Input {
        path: std::path::PathBuf,
        source: lidarfuse_core::Error,
    },
}

impl PipelineError {
    pub(crate) fn input(path: &std::path::Path) -> impl FnOnce(lidarfuse_core::Error) -> Self + '_ {
        move |source| Self::Input {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
