use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] neurodecode_core::Error),
    #[error("missing artifact {path}: run `neurodecode {producer}` first")]
    Missing { path: String, producer: &'static str },
}

impl CliError {
    /// Process exit code: 2 config, 3 missing artifact, 4 numeric, 1 other.
    pub fn exit_code(&self) -> i32 {
        use neurodecode_core::Error as E;
        match self {
            CliError::Missing { .. } => 3,
            CliError::Core(E::Config(_)) => 2,
            CliError::Core(E::Numeric(_)) => 4,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
