use std::fmt;

use serde_json::json;

/// Process exit codes.
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration, unusable checkpoint.
    Usage(String),
    /// One or more checks failed, or an output could not be produced.
    Failed(String),
    Diverged { run_id: String, step: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failed(_) => EXIT_CHECK_FAILED,
            CliError::Diverged { .. } => EXIT_DIVERGED,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Failed(_) => "failure",
            CliError::Diverged { .. } => "diverged",
        }
    }

    /// Single-line JSON object written to stderr on exit.
    pub fn to_json(&self) -> String {
        let mut v = json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        if let CliError::Diverged { run_id, step } = self {
            v["run_id"] = json!(run_id);
            v["step"] = json!(step);
        }
        v.to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Diverged { run_id, step } => write!(f, "run {run_id} diverged at step {step}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<cotlab_core::Error> for CliError {
    fn from(e: cotlab_core::Error) -> Self {
        use cotlab_core::Error as E;
        match e {
            E::Diverged { step } => CliError::Diverged {
                run_id: String::new(),
                step,
            },
            E::Io(_) => CliError::Failed(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
