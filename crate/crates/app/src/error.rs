use heparin_core::dosing::DosingError;
use heparin_core::dynamics::DynamicsError;
use heparin_core::estimation::EstimationError;
use heparin_core::evaluation::EvaluationError;
use heparin_core::io::IoError;
use heparin_core::simulator::SimError;
use serde_json::{json, Value};
use thiserror::Error;

pub const ERROR_SCHEMA: &str = "heparin.error/v1";

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Dosing(#[from] DosingError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
}

impl AppError {
    pub fn code(&self) -> &'static str {
        match self {
            AppError::Usage(_) => "usage",
            AppError::Config(_) => "config",
            AppError::Io(IoError::Chart(_)) => "invalid_chart",
            AppError::Io(_) => "io",
            AppError::Dynamics(_) => "dynamics",
            AppError::Estimation(_) => "estimation",
            AppError::Dosing(_) => "dosing",
            AppError::Simulation(_) => "simulation",
            AppError::Evaluation(_) => "evaluation",
        }
    }

    /// Document written to stderr by the CLI.
    pub fn to_json(&self) -> Value {
        let mut err = json!({ "code": self.code(), "message": self.to_string() });
        if let AppError::Io(IoError::Chart(issues)) = self {
            err["rows"] = issues
                .iter()
                .map(|i| json!({ "line": i.line, "message": i.message }))
                .collect();
        }
        json!({ "schema": ERROR_SCHEMA, "error": err })
    }
}
