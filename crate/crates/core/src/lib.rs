//! Zero-shot semantic communication over a noisy channel.
//!
//! Frozen-encoder token vectors are sent through an SNR-adaptive JSCC codec
//! over a power-constrained AWGN channel. The receiver classifies or
//! retrieves with prompts that adapt to the decoded token.

pub mod channel;
pub mod config;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod jscc;
pub mod math;
pub mod nn;
pub mod store;
pub mod tapl;
pub mod tokens;
pub mod training;
pub mod world;

pub use error::{Error, Result};
