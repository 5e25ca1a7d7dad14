//! Granularity-aware adaptation of a frozen Vision Transformer for
//! multi-task image retrieval.
//!
//! The pipeline has three steps over an unlabeled image pool:
//!
//! 1. [`pseudolabels`]: cluster frozen-backbone features at several
//!    granularities with k-means.
//! 2. [`adaptors`]: train one set of bottleneck adaptors per granularity with
//!    a norm-softmax pseudo-label classifier.
//! 3. [`fusion`]: stack every adaptor set in parallel and learn per-layer
//!    query/key attention over them with a Barlow Twins consistency loss.
//!
//! [`retrieval`] scores any feature extractor with leave-one-out R-Precision
//! and MAP@R, and [`pipeline`] orchestrates the steps on disk.

pub mod adaptors;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod pseudolabels;
pub mod retrieval;

pub use error::{GrappaError, Result};
