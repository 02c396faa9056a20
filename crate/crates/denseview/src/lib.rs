//! Desk-scale cascaded dense-view video diffusion.
//!
//! Generates a T×V grid of video frames (T time steps × V camera views) from
//! a monocular input video in two stages: a coarse low-resolution pass that
//! lays out all 16 views at once, then a structure-aware refinement pass that
//! injects the coarse layouts through a trainable condition branch while a
//! cross-attention module propagates the input video's appearance to every
//! view. Ships with its own tensor/autodiff engine, an exactly invertible
//! latent codec, a procedural multi-view renderer, dataset curation filters,
//! and grid-aware Fréchet metrics, so the whole pipeline is verifiable on a
//! CPU with property tests, gradient checks, and overfit regressions.
//!
//! Start with the runnable examples (`cargo run --example <name>`) or the
//! `denseview` binary's subcommands.

pub mod branch;
pub mod cascade;
pub mod codec;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
