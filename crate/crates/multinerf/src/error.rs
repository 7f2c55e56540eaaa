use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto exit codes:
/// usage errors are 1, I/O and format errors are 2, invariant violations 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid parameters: {0}")]
    Params(String),

    #[error("invalid scene config: {0}")]
    Config(String),

    #[error("failed to parse scene config: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("tree format error: {0}")]
    TreeFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("internal invariant violation: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error when surfaced by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Geometry(_) | Error::Params(_) => 2,
            Error::Config(_) | Error::ConfigParse(_) => 2,
            Error::TreeFormat(_) | Error::Io(_) => 2,
            Error::Invariant(_) => 3,
        }
    }
}
