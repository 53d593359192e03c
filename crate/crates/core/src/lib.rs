//! Video captioning with a clustered visual-concept dictionary.
//!
//! The pipeline: pool frame features from a corpus, fit a k-means codebook
//! (the "video dictionary"), select video-related concepts with stacked
//! multi-head cross-attention, and decode captions with a gated dual-LSTM
//! generator. Everything runs on a small reverse-mode tape in double
//! precision so gradients can be checked against finite differences.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod dictionary;
pub mod encoder;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
