//! CLI-level errors and their process exit codes.
//!
//! The binary promises stable exit codes so scripted callers can branch on
//! failure class without parsing messages:
//!
//! | code | meaning                                                        |
//! |------|----------------------------------------------------------------|
//! | 0    | full success                                                   |
//! | 1    | any failure not covered below                                  |
//! | 2    | a required class directory is missing from the dataset root    |
//! | 3    | a training loss left the finite range                          |
//! | 4    | a structured input could not be parsed (checkpoint, config, or |
//! |      | matrices file)                                                 |
//! | 5    | computed metrics drifted from the published-table values       |

use std::fmt;
use std::path::PathBuf;

use gandl_core::Error as CoreError;

pub type Result<T> = std::result::Result<T, CliError>;

/// Everything a command can fail with: engine errors pass through, plus the
/// two failure classes that only exist at the command layer.
#[derive(Debug)]
pub enum CliError {
    /// An engine error, surfaced verbatim.
    Core(CoreError),
    /// A structured input file (run config or matrices fixture) failed to
    /// parse; `detail` includes the parse location when one is known.
    Malformed { path: PathBuf, detail: String },
    /// Metrics computed from the shipped confusion matrices disagree with
    /// the published tables beyond the ±0.05 percentage-point tolerance.
    OracleMismatch { report: String },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Malformed { path, detail } => {
                write!(f, "could not parse {}: {detail}", path.display())
            }
            CliError::OracleMismatch { report } => {
                write!(f, "published-table verification failed:\n{report}")
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> CliError {
        CliError::Core(e)
    }
}

/// Maps an error to the documented process exit code.
pub fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::Core(CoreError::MissingClassDir { .. }) => 2,
        CliError::Core(CoreError::NonFiniteLoss { .. }) => 3,
        CliError::Core(CoreError::CorruptArchive(_)) => 4,
        CliError::Malformed { .. } => 4,
        CliError::OracleMismatch { .. } => 5,
        CliError::Core(_) => 1,
    }
}
