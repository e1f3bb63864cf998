use std::fmt;

use ltrc::data::DataError;
use ltrc::estimators::EstimationError;
use ltrc::functionals::FunctionalError;
use ltrc::simulation::SimulationError;

/// Error with its exit code: 2 for invalid input, 3 for estimation failure.
#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Failed(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            Self::Invalid(_) => 2,
            Self::Failed(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Invalid(m) => write!(f, "invalid input: {m}"),
            Self::Failed(m) => write!(f, "estimation failed: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Invalid(e.to_string())
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::InvalidArgument(_) => Self::Invalid(e.to_string()),
            e if e.is_support_failure() => Self::Failed(format!("SupportViolation: {e}")),
            e => Self::Failed(e.to_string()),
        }
    }
}

impl From<FunctionalError> for CliError {
    fn from(e: FunctionalError) -> Self {
        match e {
            FunctionalError::Estimation(inner) => inner.into(),
            FunctionalError::Parse { .. } | FunctionalError::InvalidWeights(_) | FunctionalError::Kernel(_) => {
                Self::Invalid(e.to_string())
            }
            e => Self::Failed(e.to_string()),
        }
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Invalid(_) | SimulationError::Json(_) | SimulationError::InvalidTarget(_) => {
                Self::Invalid(e.to_string())
            }
            SimulationError::Data(inner) => inner.into(),
            SimulationError::Estimation(inner) => inner.into(),
            e => Self::Failed(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Failed(format!("i/o error: {e}"))
    }
}
