//! Synchronization, initial and continuous registration, dataset runs and
//! the `lidarfuse` command line tool.

pub mod cli;
pub mod config;
pub mod error;
pub mod run;
pub mod session;
pub mod sync;

pub use config::{Config, FirstFrameInit, RegistrationConfig};
pub use error::{PipelineError, Result};
pub use session::{fuse, initial_registration, InitialRegistration, Session, StepOutput};
pub use sync::{synchronize, synchronize_clouds, Frame, SyncGroup, SyncReport};
