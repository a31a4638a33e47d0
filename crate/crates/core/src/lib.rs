//! Text-prompted speaker verification with digit-specific HMM i-vectors.
//!
//! The crate covers the full chain: cepstral features, digit HMMs used as
//! UBMs, Baum-Welch statistics, per-digit i-vector extractors, uncertainty
//! and channel compensation, cosine scoring with S-Norm, and evaluation
//! metrics, plus a synthetic corpus generator and a model-bundle format.

pub mod bundle;
pub mod compensation;
pub mod config;
pub mod container;
pub mod corpus;
pub mod error;
pub mod features;
pub mod gmm;
pub mod hmm;
pub mod ivector;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod scoring;
pub mod stats;

pub use error::{Error, Result};
