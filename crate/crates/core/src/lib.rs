//! Conditional domain-adversarial training on synthetic domain-shift tasks.
//!
//! The crate is a small, self-contained laboratory: a reverse-mode autodiff
//! tape ([`autodiff`]), multilayer perceptrons and momentum SGD ([`nn`]),
//! the discriminator-input constructions for marginal, concatenation,
//! norm-controlled, prototype-projected and multilinear conditioning
//! ([`conditioning`]), the adversarial and classification losses
//! ([`losses`]), Gaussian-mixture domain-shift generators with a Bayes
//! oracle ([`data`]), the training loop ([`trainer`]) and the experiment
//! harness behind the `sdan` command line ([`harness`]).

pub mod autodiff;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
