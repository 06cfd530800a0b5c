//! Command-line pipeline for incomplete-grid GPR: grid emission, fitting,
//! prediction, and matrix-vector-product scaling benchmarks.

pub mod bench;
pub mod commands;
pub mod dataset;

/// Process exit codes: 0 success, 1 usage or validation error, 2 completed
/// with warnings, 3 numerical failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    /// The command produced its output but something deserves attention.
    Warnings(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Warnings(m) => write!(f, "completed with warnings: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Warnings(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(format!("i/o error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(format!("json error: {e}"))
    }
}

impl From<gridgpr::files::FileError> for CliError {
    fn from(e: gridgpr::files::FileError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<gridgpr::grid::GridError> for CliError {
    fn from(e: gridgpr::grid::GridError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<gridgpr::gpr::GprError> for CliError {
    fn from(e: gridgpr::gpr::GprError) -> Self {
        use gridgpr::gpr::GprError;
        match &e {
            GprError::Krylov(_) | GprError::Precond(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}
