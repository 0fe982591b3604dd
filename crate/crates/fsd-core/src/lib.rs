//! Speculative decoding (SD), fuzzy speculative decoding (FSD), and exact
//! enumeration oracles over small autoregressive table models.
//!
//! The crate is split into:
//!
//! - [`prob`]: token, vocabulary, and categorical-distribution primitives
//!   with seeded counter-based sampling.
//! - [`divergence`]: KL, Jensen-Shannon, and total-variation divergences
//!   plus the FSD threshold test.
//! - [`models`]: autoregressive backends — Markov table models and a
//!   synthetic draft/target pair generator with an alignment knob.
//! - [`decoding`]: the draft-propose / target-verify loop under SD, FSD,
//!   reducible FSD, random-acceptance, and single-model policies, with
//!   full trace and metric capture.
//! - [`oracle`]: exact sequence-distribution enumeration used to verify
//!   the distributional guarantees and divergence bounds of the decoders.
//!
//! The crate is `no_std` compatible (with `alloc`); IO, file formats, and
//! the CLI live in the companion `fsd-lab` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod decoding;
pub mod divergence;
mod error;
pub mod models;
pub mod oracle;
pub mod prob;
pub mod rng;

pub use error::Error;

pub type Result<T> = core::result::Result<T, Error>;
