//! Point-cloud / text contrastive learning over a 3×3×3 block grid.
//!
//! The pipeline encodes every point with a shared MLP, pools a global
//! object feature and 27 block features, refines the block tokens with
//! self-attention plus cross-attention against the global embedding, and
//! aligns both levels with frozen text embeddings through InfoNCE-style
//! losses. Trained checkpoints support zero-head classification, free-text
//! reasoning and per-block part reasoning heatmaps.

pub mod autodiff;
pub mod blocks;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod labels;
pub mod losses;
pub mod model;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
