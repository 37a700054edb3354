use artik_core::control::ControlError;
use artik_core::dynamics::DynamicsError;
use artik_core::estimation::EstimationError;
use artik_core::params::ParamError;
use artik_core::topology::TopologyError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Parse(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::UnknownPreset(_) | DynamicsError::BadTimeStep(_) => CliError::Usage(e.to_string()),
            DynamicsError::DimensionMismatch { .. } | DynamicsError::InvalidMechanism(_) => CliError::Parse(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ParamError> for CliError {
    fn from(e: ParamError) -> Self {
        CliError::Parse(e.to_string())
    }
}

impl From<TopologyError> for CliError {
    fn from(e: TopologyError) -> Self {
        match e {
            TopologyError::Observation(_) | TopologyError::BodyMismatch(_) => CliError::Parse(e.to_string()),
            TopologyError::Fit(_) => CliError::Usage(e.to_string()),
            TopologyError::Mechanism(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::Param(p) => p.into(),
            EstimationError::Dynamics(d) => d.into(),
            EstimationError::Config(_) => CliError::Usage(e.to_string()),
            EstimationError::Mismatch(_) => CliError::Parse(e.to_string()),
            EstimationError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ControlError> for CliError {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::Config(_) => CliError::Usage(e.to_string()),
            ControlError::Param(p) => p.into(),
            ControlError::Dynamics(d) => d.into(),
            ControlError::AllRolloutsDiverged => CliError::Numerical(e.to_string()),
        }
    }
}
