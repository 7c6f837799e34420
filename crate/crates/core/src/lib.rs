//! Multi-behavior generative sequential recommendation.
//!
//! Users' interaction histories (item, behavior, timestamp) are cut into
//! sessions, items are mapped to short code tuples (semantic or chunked
//! IDs), and a decoder-only model with a cross-level behavior attention
//! sublayer and role-routed experts generates the code tuple of the next
//! item for a requested behavior under trie-constrained beam search.

// `!(x > 0.0)` is used on purpose so that NaN config values are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod ranking;
pub mod rng;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
