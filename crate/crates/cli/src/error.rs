use std::path::PathBuf;

/// Command failures. `Display` is the single machine-parseable line printed
/// on exit: `<kind>:<detail>`.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing-input:{}", .0.display())]
    MissingInput(PathBuf),

    #[error("config-mismatch:{}: built with {found}, config expects {expected}", .path.display())]
    ConfigMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("invalid-config:{0}")]
    InvalidConfig(String),

    #[error("io:{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("error:{}", single_line(.0))]
    Core(#[from] golden_layer::Error),
}

impl CliError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingInput(_) => 3,
            CliError::ConfigMismatch { .. } => 4,
            CliError::InvalidConfig(_) => 5,
            CliError::Io { .. } => 6,
            CliError::Core(_) => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

fn single_line(e: &golden_layer::Error) -> String {
    e.to_string().replace(['\n', '\r'], " ")
}

pub type Result<T> = std::result::Result<T, CliError>;
