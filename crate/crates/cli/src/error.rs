use aces_core::circuit::CircuitError;
use aces_core::design::DesignError;
use aces_core::estimate::EstimationError;
use aces_core::merit::MeritError;
use aces_core::noise::NoiseError;
use aces_core::optimise::OptimiseError;
use aces_core::simulate::SimulationError;
use thiserror::Error;

/// Command failure, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CircuitError> for CliError {
    fn from(e: CircuitError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<NoiseError> for CliError {
    fn from(e: NoiseError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DesignError> for CliError {
    fn from(e: DesignError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<MeritError> for CliError {
    fn from(e: MeritError) -> Self {
        match e {
            MeritError::Design(d) => d.into(),
            MeritError::Weights(_) | MeritError::Toy(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<OptimiseError> for CliError {
    fn from(e: OptimiseError) -> Self {
        match e {
            OptimiseError::Merit(m) => m.into(),
            OptimiseError::Design(d) => d.into(),
            OptimiseError::Config(_) => CliError::Usage(e.to_string()),
        }
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Design(d) => d.into(),
            SimulationError::Io(_) | SimulationError::Json(_) | SimulationError::Format(_) => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::Design(d) => d.into(),
            EstimationError::Noise(n) => n.into(),
            EstimationError::Mismatch(_) => CliError::Usage(e.to_string()),
            EstimationError::RankDeficient(_) | EstimationError::Singular => CliError::Numerical(e.to_string()),
        }
    }
}
