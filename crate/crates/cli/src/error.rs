use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] tweeze_core::Error),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 config, 3 numeric, 4 verification, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        use tweeze_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Verification(_) => 4,
            CliError::Io { .. } => 5,
            CliError::Core(e) => match e {
                E::Config(_) | E::Shape { .. } | E::Layout(_) => 2,
                E::Domain { .. }
                | E::ScheduleDegenerate { .. }
                | E::DegenerateTimestep { .. }
                | E::Numeric(_)
                | E::UnreliableEstimate { .. }
                | E::EmptyTrajectory => 3,
                E::Trace(_) => 4,
                E::Io(_) => 5,
            },
        }
    }
}
