//! Answer-aware conversational question generation.
//!
//! A dialogue over a passage is expanded into sub-dialogues, each one
//! encoded as a chain of calls into a small causal transformer: an answer
//! encoding module consumes the highlighted passage and answers, a question
//! generation module consumes questions, and both extend one shared
//! key/value cache. Training scores only the final turn's answer and
//! question; generation decodes the next question from the accumulated
//! cache.

pub mod ablation;
pub mod chain;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod sampler;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
