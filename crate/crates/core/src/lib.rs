//! Symbolic-music generation with a VQ-VAE tokenizer and mask-and-replace
//! discrete diffusion over codebook indices, plus the objective evaluation
//! used to score generations.
//!
//! The crate is `no_std` and only needs `alloc`; file formats, MIDI and the
//! command-line pipeline live in the `vqdiff` companion crate.

#![no_std]

extern crate alloc;

mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod music;
pub mod vqvae;
pub mod diffusion;
pub mod denoiser;
pub mod eval;
pub mod synth;
