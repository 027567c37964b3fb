//! Factorized multimodal fusion on synthetic tri-modal data.
//!
//! The pipeline: a mixture of Q-Former experts compresses each padded
//! modality sequence to a fixed token count, a factorized task-relevant
//! encoder splits those tokens into shared/unique branches and filters
//! task-irrelevant noise through mutual-information objectives, a
//! transformer encoder fuses the six task-relevant blocks, and a dynamic
//! contrastive queue supplies an angle-compensated contrastive loss over
//! historical embeddings. Everything runs on a small reverse-mode tensor
//! engine ([`numcore`]) that is finite-difference checked end to end.

pub mod data;
pub mod dcq;
pub mod ftre;
pub mod fusion;
pub mod harness;
pub mod moq;
pub mod numcore;

mod error;

pub use error::{Error, Result};
