//! Semi-supervised single-image dehazing lab.
//!
//! The pieces, bottom up: rank-4 tensors with a reverse-mode tape
//! ([`tensor`]), Haar analysis/synthesis ([`wavelet`]), the atmospheric
//! scattering model and dark-channel baseline ([`haze`]), image quality
//! metrics ([`metrics`]), the composite training objective ([`losses`]), the
//! encoder–decoder generator and patch discriminator ([`network`]), the Adam
//! training loop ([`trainer`]), file formats ([`io`]), the ablation harness
//! ([`ablation`]), and the command-line surface ([`cli`]).

pub mod ablation;
pub mod cli;
pub mod error;
pub mod haze;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

#[cfg(test)]
pub(crate) mod testsupport;

pub use error::{Error, Result};
