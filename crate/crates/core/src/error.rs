use thiserror::Error;

use crate::calibration::CalibrationError;
use crate::eval::EvalError;
use crate::midi::MidiError;
use crate::model::ModelError;
use crate::pairs::PairError;
use crate::tokenizer::TokenizerError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Umbrella error tagging each failure with the module it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("midi: {0}")]
    Midi(#[from] MidiError),
    #[error("tokenizer: {0}")]
    Tokenizer(#[from] TokenizerError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("calibration: {0}")]
    Calibration(#[from] CalibrationError),
    #[error("pairs: {0}")]
    Pairs(#[from] PairError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
}
