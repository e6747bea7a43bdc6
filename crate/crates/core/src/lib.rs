//! Retrieval-augmented demonstration selection for multi-modal
//! chain-of-thought prompting.
//!
//! The pipeline for one test question:
//!
//! 1. [`sampler::select_strategy`] picks the active retrieval channels from a
//!    [`sampler::StrategyTable`] keyed by dataset kind and image presence.
//! 2. [`retrieval::retrieve_channels`] runs exact top-k cosine search
//!    ([`index::top_k`]) for each channel over precomputed embeddings.
//! 3. [`sampler::stratified_sample`] interleaves the channel lists into a
//!    deduplicated demonstration set.
//! 4. [`prompt::assemble_prompt`] renders visual info, demonstrations and
//!    the question; [`gateway::Gateway`] gets a completion and
//!    [`prompt::extract_answer`] reads the prediction back.
//!
//! [`eval`] drives this over a whole split and aggregates per-category
//! accuracy.

pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod index;
pub mod model;
pub mod prompt;
pub mod retrieval;
pub mod sampler;
pub mod synthetic;

pub use error::{Error, Result};
pub use model::{Channel, Demonstration, MultimodalQuestion, Space, Split, VisualInfo};
