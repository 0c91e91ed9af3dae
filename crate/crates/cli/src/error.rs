use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] icone::Error),

    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Missing(String),

    #[error("{failed} of {total} ablation cells failed")]
    Cells { failed: usize, total: usize, code: u8 },
}

impl CliError {
    pub fn file(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::File { path, source }
    }

    /// Process exit status: 2 configuration, 3 numerical, 4 input/output.
    pub fn exit_code(&self) -> u8 {
        use icone::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::File { .. } | CliError::Missing(_) => 4,
            CliError::Cells { code, .. } => *code,
            CliError::Core(e) => match e {
                E::Config(_) | E::Shape(_) | E::Index { .. } => 2,
                E::Numerical(_) | E::Domain(_) => 3,
                E::Io(_) | E::Parse(_) => 4,
                E::Contract(_) => 1,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
