use std::path::PathBuf;

use idxcover::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
    #[error("infeasible: {0}")]
    Infeasible(String),
}

impl CliError {
    /// 2 for configuration, 3 for data, 4 for infeasibility.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Output { .. } => 2,
            CliError::Infeasible(_) => 4,
            CliError::Core(e) => match e {
                Error::Domain(_) | Error::Config(_) | Error::AlphaTooLarge { .. } => 2,
                Error::Infeasible(_) | Error::NoRoot(_) | Error::EmptyIndexSet { .. } | Error::DegenerateDemand { .. } => 4,
                _ => 3,
            },
        }
    }
}
