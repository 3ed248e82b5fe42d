//! Design-specific synthesis flow generation.
//!
//! Flows are ordered sequences of logic transformations. This crate samples
//! the flow space, measures flows with a QoR oracle, labels them into
//! percentile classes, trains a convolutional classifier on one-hot flow
//! matrices, and picks the flows most confidently predicted best ("angels")
//! and worst ("devils").

pub mod ablation;
pub mod cli;
pub mod encoding;
pub mod error;
pub mod flowspace;
pub mod hashing;
pub mod labeling;
pub mod nn;
pub mod oracle;
pub mod persist;
pub mod pipeline;
pub mod rundir;

pub use error::{Error, Result};
