use ragplan_core::backend::BackendError;
use ragplan_core::dpo::{ConfigError, DpoError};
use ragplan_core::policy::PolicyError;
use ragplan_core::retrieval::RetrievalError;
use ragplan_core::stats::StatsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("backend: {0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Backend(_) => 4,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DpoError> for CliError {
    fn from(e: DpoError) -> Self {
        match e {
            DpoError::Config(c) => c.into(),
            DpoError::TooFewCandidates(_) => CliError::Config(e.to_string()),
            DpoError::TooManySkipped { .. } => CliError::Backend(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            // a rules file that does not load is a configuration problem
            BackendError::InvalidRequest(m) => CliError::Config(m),
            other => CliError::Backend(other.to_string()),
        }
    }
}
