//! Frequency-augmented VQ-VAE (FA-VAE) at desk scale.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]) on which everything else is built: the frequency-domain
//! losses ([`spectral`]), discrete codebook quantization ([`vq`]), the
//! FA-VAE encoder/decoder with frequency complement modules ([`model`]),
//! and a toy cross-attention autoregressive prior over latent indices
//! ([`cat`]). [`harness`] ties these into reproducible training runs
//! driven by the `favae` CLI.

pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod vq;

mod error;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
