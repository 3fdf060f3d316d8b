//! Customized conversational recommendation.
//!
//! The crate combines a user-conditioned knowledge-graph entity encoder, an
//! intention pooling recommender, a multi-style transformer response
//! generator and a two-phase meta-learning trainer.

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod dialogue;
pub mod engine;
pub mod error;
pub mod graph_encoder;
pub mod intention;
pub mod meta_trainer;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod tensor;

#[cfg(test)]
mod gradcheck;

pub use error::{CcrsError, Result};
