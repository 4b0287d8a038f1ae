use std::fmt;

use platform_gp::GpError;
use serde::Serialize;

/// Command failure, grouped by exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Malformed dataset or config (exit 2).
    Input(String),
    /// No subject eligible for both arms (exit 3).
    EmptyEce(String),
    /// Model fitting or estimation failed (exit 4).
    Fit(String),
    /// File could not be read or written (exit 5).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::EmptyEce(_) => 3,
            CliError::Fit(_) => 4,
            CliError::Io(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Input(_) => "input",
            CliError::EmptyEce(_) => "empty_ece",
            CliError::Fit(_) => "fit",
            CliError::Io(_) => "io",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::EmptyEce(m) | CliError::Fit(m) | CliError::Io(m) => m,
        }
    }

    /// One-line JSON record for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a str,
            message: &'a str,
            exit_code: i32,
        }
        serde_json::to_string(&Record {
            error: self.kind(),
            message: self.message(),
            exit_code: self.exit_code(),
        })
        .expect("error record serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl std::error::Error for CliError {}

impl From<GpError> for CliError {
    fn from(e: GpError) -> Self {
        match e {
            GpError::EmptyEce { .. } => CliError::EmptyEce(e.to_string()),
            GpError::InvalidParameter(_) | GpError::InvalidKernel(_) | GpError::InvalidOutcome(_) => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Fit(e.to_string()),
        }
    }
}

pub fn io_error(path: &std::path::Path, e: impl fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
