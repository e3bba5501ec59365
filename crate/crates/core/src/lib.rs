//! Unsupervised universal fine-tuning of a frozen dual-encoder head.
//!
//! The crate adapts a small set of parameters (a channel-wise affine map on
//! image embeddings and shared prompt-context vectors) over unlabeled
//! embedding caches with confidence-weighted entropy objectives, then
//! evaluates ID accuracy and OOD detection under category shift.

pub mod datamodel;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod par;
pub mod plot;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
