use dialport_core::adapters::AdapterError;
use dialport_core::checkpoint::CheckpointError;
use dialport_core::data::DataError;
use dialport_core::eval::EvalError;
use dialport_core::model::ModelError;
use dialport_core::strategy::{AgentError, StrategyError};
use dialport_core::training::TrainError;
use dialport_service::ServiceError;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;

/// A failed command: the message plus the process exit code.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }

    fn with(code: u8, e: impl std::fmt::Display) -> Self {
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Config(_) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Config(_) => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}

fn adapter_code(e: &AdapterError) -> u8 {
    match e {
        AdapterError::Format(_) => EXIT_DATA,
        _ => EXIT_CONFIG,
    }
}

fn checkpoint_code(e: &CheckpointError) -> u8 {
    match e {
        CheckpointError::Model(m) => model_code(m),
        CheckpointError::Adapter(a) => adapter_code(a),
        _ => EXIT_DATA,
    }
}

fn eval_code(e: &EvalError) -> u8 {
    match e {
        EvalError::Model(m) => model_code(m),
        EvalError::Data(d) => data_code(d),
        _ => EXIT_DATA,
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::with(data_code(&e), e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::with(model_code(&e), e)
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        Self::with(adapter_code(&e), e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::with(checkpoint_code(&e), e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::with(eval_code(&e), e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Config(_) | TrainError::Workflow(_) => EXIT_CONFIG,
            TrainError::Divergence { .. } => EXIT_DIVERGENCE,
            TrainError::Io(_) => EXIT_DATA,
            TrainError::Data(d) => data_code(d),
            TrainError::Model(m) => model_code(m),
            TrainError::Adapter(a) => adapter_code(a),
            TrainError::Checkpoint(c) => checkpoint_code(c),
            TrainError::Eval(v) => eval_code(v),
            TrainError::FreezeViolation(_) | TrainError::NoRecords => EXIT_FAILURE,
        };
        Self::with(code, e)
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        let code = match &e {
            AgentError::Model(m) => model_code(m),
            AgentError::Data(d) => data_code(d),
            AgentError::Input(_) => EXIT_CONFIG,
            AgentError::Translation(_) => EXIT_FAILURE,
        };
        Self::with(code, e)
    }
}

impl From<StrategyError> for CliError {
    fn from(e: StrategyError) -> Self {
        let code = match &e {
            StrategyError::Config(_) => EXIT_CONFIG,
            StrategyError::Checkpoint(c) => checkpoint_code(c),
            StrategyError::Data(d) => data_code(d),
            StrategyError::Agent(AgentError::Input(_)) => EXIT_CONFIG,
            StrategyError::Agent(_) => EXIT_FAILURE,
            StrategyError::Adapter(a) => adapter_code(a),
        };
        Self::with(code, e)
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        let code = match &e {
            ServiceError::Config(_) => EXIT_CONFIG,
            ServiceError::Storage(_) => EXIT_DATA,
        };
        Self::with(code, e)
    }
}
