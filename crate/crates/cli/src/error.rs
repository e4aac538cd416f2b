use std::fmt;

use eluq_core::analysis::AnalysisError;
use eluq_core::checkpoint::CheckpointError;
use eluq_core::config::ConfigError;
use eluq_core::dataset::DatasetError;
use eluq_core::generator::GeneratorError;
use eluq_core::inference::{InferenceError, RecordError};

/// Failure classes, one exit code each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Other,
    Usage,
    Io,
    Diverged,
    Selftest,
}

impl Class {
    pub fn code(self) -> i32 {
        match self {
            Class::Other => 1,
            Class::Usage => 2,
            Class::Io => 3,
            Class::Diverged => 4,
            Class::Selftest => 5,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: Class,
    pub message: String,
}

impl CliError {
    pub fn new(class: Class, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Class::Usage, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(Class::Io, message)
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self::new(Class::Other, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => Self::io(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<GeneratorError> for CliError {
    fn from(e: GeneratorError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(_) => Self::io(e.to_string()),
            DatasetError::Generator(_) => Self::usage(e.to_string()),
            DatasetError::Format(_) => Self::other(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => Self::io(e.to_string()),
            _ => Self::other(e.to_string()),
        }
    }
}

impl From<RecordError> for CliError {
    fn from(e: RecordError) -> Self {
        match e {
            RecordError::Io { .. } => Self::io(e.to_string()),
            RecordError::Format { .. } => Self::other(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Config(_) => Self::usage(e.to_string()),
            InferenceError::Width { .. } => Self::other(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Io { .. } => Self::io(e.to_string()),
            _ => Self::other(e.to_string()),
        }
    }
}
