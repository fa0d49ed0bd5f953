use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] beamvision::Error),

    #[error("run directory {0} already exists; runs are never overwritten")]
    RunExists(PathBuf),

    #[error("pretrained backbone {0} not found; run `beamvision pretrain` first or use --plan from_scratch")]
    MissingPretrained(PathBuf),

    #[error("{path} is not a run directory: {message}")]
    NotARun { path: PathBuf, message: String },
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::RunExists(_) => "run-exists",
            CliError::MissingPretrained(_) => "missing-pretrained",
            CliError::NotARun { .. } => "not-a-run",
        }
    }
}

pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> CliError {
    CliError::Core(beamvision::Error::Io {
        path: path.into(),
        source,
    })
}
