//! Latent-conditioned physics-informed decoders for parametric PDE families.
//!
//! A shared decoder `u_θ(x, z)` is pre-trained on many PDE instances, each with
//! its own latent code `z`, then adapted to an unseen instance by optimizing
//! the latent alone or the latent together with the weights.

pub mod diffcore;
pub mod network;
pub mod problems;
pub mod training;
pub mod eval;
pub mod persist;
pub mod config;
pub mod cli;

mod error;

pub use error::{Error, Result};
