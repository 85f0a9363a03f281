//! Conflict-aware low-rank adapter initialization for continual learning.
//!
//! The pipeline estimates current- and previous-task gradients on a frozen
//! base model, reconciles them with a parameterized PCGrad projection,
//! factorizes the reconciled gradient with a truncated SVD, rescales the
//! factors to match the base-weight variance, and absorbs the non-zero
//! initialization into the base so the network function is unchanged at
//! step 0. Around it: baseline initializers (vanilla, gradient-aligned,
//! DST-basis) under the identical rescaling protocol, a sequential
//! continual-learning harness with the AP/FP/Fgt/GP/IP metric suite, and an
//! exhaustive miner for maximally gradient-conflicting task sequences.

pub mod error;
pub mod gradients;
pub mod harness;
pub mod init;
pub mod linalg;
pub mod metrics;
pub mod miner;
pub mod model;
pub mod seeds;
pub mod surgery;
pub mod tasks;

pub use error::{Result, SliceError};
