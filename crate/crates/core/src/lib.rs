//! Detection core for monitoring the inner activations of a neural network.
//!
//! The pipeline subsamples an activation volume with a fixed blue-noise key
//! ([`sampling`]), learns a normalizing-flow density model of the sampled
//! activations ([`flow`], [`trainer`]) and scores latent codes with
//! distance-based heads ([`scoring`]). Detectors are compared with the
//! ranking metrics in [`evaluation`].
//!
//! The crate is `no_std` and only needs `alloc`. File formats and the
//! command line live in the companion `actguard` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod linalg;
pub mod numerics;
pub mod record;
pub mod sampling;
pub mod scoring;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{NumArray, SeededRng};
