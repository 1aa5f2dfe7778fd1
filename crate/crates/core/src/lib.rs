//! Embedding calibration toolkit for symbolic music similarity.
//!
//! The pipeline runs from performance data to a ranked table of calibration
//! settings:
//!
//! 1. [`midi`] parses Standard MIDI Files or a plain-text note list into
//!    time-ordered note streams with composer metadata.
//! 2. [`tokenizer`] turns notes into performance events and aggregates
//!    frequent event n-grams into multi-event words.
//! 3. [`model`] produces per-layer, per-position activations, either from a
//!    small causal Transformer or from activation dumps on disk.
//! 4. [`calibration`] pools and averages layers, then applies standard
//!    normalization and top singular-vector removal.
//! 5. [`pairs`] cuts token streams into sliding windows and samples
//!    same-composer / different-composer pairs.
//! 6. [`eval`] scores every calibration setting by the Spearman correlation
//!    between pair cosine similarity and the composer label.

pub mod calibration;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod midi;
pub mod model;
pub mod pairs;
pub mod rng;
pub mod synthetic;
pub mod tokenizer;

pub use calibration::{
    CalibrationConfig, CalibrationOptions, LayerPools, NormalizationStats, PipelineOrder,
    PrincipalDirections, SentenceEmbedding, Weighting,
};
pub use error::{Error, Result};
pub use eval::{GridOutcome, GridResult, GridSpec, PValueMethod};
pub use midi::{CorpusManifest, ManifestEntry, Note, NoteStream, Piece};
pub use model::{ActivationShape, LayerActivations, ModelShape, ModelWeights};
pub use pairs::{ExclusionPolicy, LabeledPair, SamplerConfig, Window, WindowRef};
pub use rng::XorShift64Star;
pub use tokenizer::{PerformanceEvent, TokenizerConfig, Vocabulary};
