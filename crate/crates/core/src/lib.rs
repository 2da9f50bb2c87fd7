//! Dataset construction and evaluation toolkit for reasoning-driven image
//! editing.
//!
//! The crate turns instruction-editing corpora into samples with indirect
//! "reasoning" instructions, and scores editors on a benchmark built the
//! same way. Every model call goes through the traits in [`backends`], so
//! the whole flow runs offline against seeded mocks.

pub mod backends;
pub mod config;
pub mod evalkit;
pub mod fixtures;
pub mod hashing;
pub mod imaging;
pub mod pipeline;
pub mod prompts;
pub mod records;
