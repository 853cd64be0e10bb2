use std::fmt;

/// Top-level failure with the exit code contract: 2 configuration,
/// 3 pipeline, 4 evaluation.
#[derive(Debug)]
pub enum AppError {
    Config(String),
    Pipeline(String),
    Evaluation(String),
}

impl AppError {
    pub fn config(msg: impl Into<String>) -> Self {
        AppError::Config(msg.into())
    }
    pub fn pipeline(msg: impl Into<String>) -> Self {
        AppError::Pipeline(msg.into())
    }
    pub fn evaluation(msg: impl Into<String>) -> Self {
        AppError::Evaluation(msg.into())
    }
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Pipeline(_) => 3,
            AppError::Evaluation(_) => 4,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Config(m) => write!(f, "config error: {m}"),
            AppError::Pipeline(m) => write!(f, "pipeline error: {m}"),
            AppError::Evaluation(m) => write!(f, "evaluation error: {m}"),
        }
    }
}

impl std::error::Error for AppError {}
