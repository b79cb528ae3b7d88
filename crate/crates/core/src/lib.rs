//! Multi-turn dialogue generation under predicted contexts: a small
//! encoder-decoder, hierarchical scheduled sampling, coherence classifiers,
//! KL-regularized coherence fine-tuning, beam re-ranking and a self-talk
//! evaluation harness.

pub mod checkpoint;
pub mod coherence;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rl;
pub mod rng;
pub mod sampling;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
