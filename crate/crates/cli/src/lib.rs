//! Pipeline orchestration behind the `simcal` binary: run configuration,
//! the tokenize / vocab / embed / pairs / grid stages, and the artifact
//! manifest written by a full run.

pub mod artifacts;
pub mod config;
pub mod pipeline;

pub use artifacts::{Artifact, ArtifactManifest};
pub use config::RunConfig;
pub use pipeline::{cmd_all, cmd_embed, cmd_grid, cmd_pairs, cmd_tokenize, cmd_vocab};
