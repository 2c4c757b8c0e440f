//! Multi-grained multimodal document understanding.
//!
//! OCR pages are turned into a document graph of words, image patches, text
//! segments and clustered salient regions. A fine-grained spatial-aware
//! encoder, cross-grained aggregation, a coarse-grained encoder and
//! cross-grained fusion produce per-token features for sequence labeling.

pub mod attention;
pub mod cli;
pub mod cluster;
pub mod doc;
pub mod embed;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod render;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
