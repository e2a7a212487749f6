use thiserror::Error;

use crate::bpe::BpeError;
use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::normalize::NormalizeError;
use crate::train::TrainError;

/// Broad failure classes, each with a fixed process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Config,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Config => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Normalize(#[from] NormalizeError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Usage(_) => ErrorKind::Usage,
            Error::Config(_) => ErrorKind::Config,
            Error::Input(_) | Error::Data(_) => ErrorKind::Data,
            Error::Normalize(NormalizeError::UnknownScheme(_)) => ErrorKind::Config,
            Error::Normalize(NormalizeError::EmptyPart(_)) => ErrorKind::Data,
            Error::Bpe(e) => bpe_kind(e),
            Error::Model(e) => model_kind(e),
            Error::Train(e) => train_kind(e),
            Error::Metrics(e) => match e {
                MetricsError::Predict(t) => train_kind(t),
                MetricsError::NonSquare { .. } => ErrorKind::Config,
                _ => ErrorKind::Data,
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind().exit_code()
    }
}

fn bpe_kind(e: &BpeError) -> ErrorKind {
    match e {
        BpeError::BudgetTooSmall { .. } | BpeError::MaxLenTooSmall(_) => ErrorKind::Config,
        _ => ErrorKind::Data,
    }
}

fn model_kind(e: &ModelError) -> ErrorKind {
    match e {
        ModelError::InvalidConfig(_) | ModelError::TooFewClasses(_) | ModelError::InvalidMaskRate(_) => {
            ErrorKind::Config
        }
        ModelError::TooLong { .. } => ErrorKind::Config,
        _ => ErrorKind::Data,
    }
}

fn train_kind(e: &TrainError) -> ErrorKind {
    match e {
        TrainError::InvalidConfig(_) | TrainError::TooLarge { .. } => ErrorKind::Config,
        TrainError::Model(m) => model_kind(m),
        TrainError::Bpe(b) => bpe_kind(b),
        _ => ErrorKind::Data,
    }
}
