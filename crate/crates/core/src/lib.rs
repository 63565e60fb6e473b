//! Parallel-encoded KV caches for context-augmented generation.
//!
//! Contexts are encoded once, independently, into position-reused KV caches
//! ([`kv_store`]). At decode time the query attends over a shared prefix, all
//! cached contexts and its own tokens; [`attention`] merges the per-segment
//! partial attentions through their LogSumExp values, optionally sharpening
//! context attention with a temperature and damping the context LSE with a
//! scaling factor.

pub mod attention;
pub mod cache_sim;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod kv_store;
pub mod model;
pub mod rope;
pub mod tensor;
pub mod tuner;

pub use attention::{ApeConfig, AttentionMode, PartialAttention, ScalingMode};
pub use error::{ApeError, Result};
pub use kv_store::{ContextCacheEntry, KvSegment, KvStore, Role};
pub use model::{DecodeOutput, Model, ToyModelSpec};
pub use tensor::{Mat, RowMask};
