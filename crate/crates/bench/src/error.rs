use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config line {line}: {reason}")]
    Syntax { line: usize, reason: String },

    #[error("config key {key}: {reason}")]
    Config { key: String, reason: String },

    #[error("learned optimizer needs a checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("meta-iteration budgets differ: {0}")]
    BudgetMismatch(String),

    #[error("no run results found under {0}")]
    EmptyResults(PathBuf),

    #[error(transparent)]
    Core(#[from] learnopt::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BenchError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        BenchError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Stable machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            BenchError::Syntax { .. } | BenchError::Config { .. } => "config",
            BenchError::MissingCheckpoint(_) => "checkpoint",
            BenchError::BudgetMismatch(_) => "budget-mismatch",
            BenchError::EmptyResults(_) => "empty-results",
            BenchError::Core(learnopt::Error::Checkpoint(_)) => "checkpoint",
            BenchError::Core(learnopt::Error::Diverged(_)) => "diverged",
            BenchError::Core(learnopt::Error::Io(_)) | BenchError::Io(_) => "io",
            BenchError::Core(
                learnopt::Error::BadMagic { .. } | learnopt::Error::Truncated { .. } | learnopt::Error::CountMismatch { .. },
            ) => "data",
            BenchError::Core(learnopt::Error::Json(_)) | BenchError::Json(_) => "format",
            BenchError::Csv(_) => "format",
            BenchError::Core(_) => "compute",
        }
    }

    /// Process exit status for [`category`](Self::category).
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "io" => 3,
            "checkpoint" => 4,
            "budget-mismatch" => 5,
            "empty-results" => 6,
            "diverged" => 7,
            "data" => 8,
            "format" => 9,
            _ => 1,
        }
    }
}
