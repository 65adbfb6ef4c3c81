//! Desk-scale latent video diffusion.
//!
//! The pipeline runs end to end on a CPU: a synthetic moving-sprites corpus
//! ([`corpus`]), a spatio-temporal autoencoder ([`autoencoder`]), a U-ViT noise
//! predictor over 3D latent patches ([`uvit`]), the diffusion machinery and
//! DDIM sampler ([`diffusion`]), controllable generation ([`control`]) and
//! pixel-level evaluation ([`eval`]). [`app`] wires them into the CLI commands.

pub mod app;
pub mod autoencoder;
pub mod checkpoint;
pub mod control;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nn;
pub mod seed;
pub mod text;
pub mod train;
pub mod uvit;

pub use error::{Error, Result};
