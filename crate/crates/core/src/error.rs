use thiserror::Error;

use crate::epochs::EpochError;
use crate::evalstats::EvalError;
use crate::intent::IntentError;
use crate::iostream::FormatError;
use crate::nnet::NetError;
use crate::session::SessionError;
use crate::synthgen::SynthError;

#[derive(Debug, Error)]
pub enum AidError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Epoch(#[from] EpochError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Intent(#[from] IntentError),
}

impl AidError {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        match self {
            AidError::Session(_) => true,
            AidError::Synth(SynthError::InvalidModel { .. }) => true,
            AidError::Eval(EvalError::Config(_)) | AidError::Eval(EvalError::Usage(_)) => true,
            AidError::Intent(_) => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, AidError>;
