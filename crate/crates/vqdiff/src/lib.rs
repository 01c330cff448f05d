//! Std companion to `vqdiff-core`: MIDI files, the binary corpus and
//! checkpoint formats, run configuration, exports and the staged pipeline
//! behind the `vqdiff` command.

pub mod checkpoint;
pub mod config;
pub mod corpus_file;
mod error;
pub mod export;
pub mod manifest;
pub mod midi;
pub mod models;
pub mod pipeline;

pub use error::{Error, Result};
