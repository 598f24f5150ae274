//! Test-time robustification of probabilistic classifiers.
//!
//! Given a single test input, sample augmented copies, take one gradient
//! step on the entropy of the model's marginal output distribution over
//! those copies, and predict on the original input. The crate bundles the
//! pieces needed to study that procedure end to end at desk scale: a small
//! reverse-mode autodiff tensor library, batch-norm classifier models with
//! training and checkpointing, an augmentation sampler, the adaptation
//! strategies and baselines, synthetic/IDX/CIFAR data with a corruption
//! suite, and an evaluation harness with CSV output.

pub mod adapt;
pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
