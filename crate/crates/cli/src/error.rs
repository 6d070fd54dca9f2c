use dialyzer_core::cohort::CohortError;
use dialyzer_core::forward::ForwardError;
use dialyzer_core::inverse::InverseError;
use dialyzer_core::profile::ProfileError;
use thiserror::Error;

/// Errors grouped by exit code so batch scripts can branch on the kind.
#[derive(Debug, Error)]
pub enum CliError {
    /// A solver or optimizer did not converge.
    #[error("{0}")]
    NonConvergence(String),
    /// Any other runtime failure.
    #[error("{0}")]
    Failure(String),
    /// Bad config, profile, input file or flag.
    #[error("{0}")]
    Config(String),
    /// A bundle does not match the current version, profile or its own digests.
    #[error("{0}")]
    Mismatch(String),
    #[error("incomplete bundle {dir}: missing {}", .missing.join(", "))]
    Incomplete { dir: String, missing: Vec<String> },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::NonConvergence(_) | CliError::Failure(_) => 1,
            CliError::Config(_) => 2,
            CliError::Mismatch(_) => 3,
            CliError::Incomplete { .. } => 4,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Failure(format!("{}: {e}", path.display()))
    }
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CohortError> for CliError {
    fn from(e: CohortError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ForwardError> for CliError {
    fn from(e: ForwardError) -> Self {
        match e {
            ForwardError::Newton(_) => CliError::NonConvergence(e.to_string()),
            ForwardError::InvalidBeta(_) => CliError::Config(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<InverseError> for CliError {
    fn from(e: InverseError) -> Self {
        match e {
            InverseError::Forward { patient, source } => match CliError::from(source) {
                CliError::NonConvergence(m) => CliError::NonConvergence(format!("patient {patient}: {m}")),
                other => CliError::Failure(format!("patient {patient}: {other}")),
            },
            InverseError::Usage(_) | InverseError::ZeroTarget { .. } | InverseError::NoTargets(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Failure(e.to_string()),
        }
    }
}
