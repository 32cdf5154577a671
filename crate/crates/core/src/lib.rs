//! Pose estimation by template retrieval over token-grid descriptors.
//!
//! Query crops and rendered templates are represented as grids of per-patch
//! descriptors. Retrieval scores each template by the masked, thresholded sum
//! of per-token cosine similarities; the best template's rotation is lifted to
//! a 6D pose from bounding-box geometry and evaluated with Acc15 and VSD.
//! A linear projection head can be trained on descriptor tuples with an
//! InfoNCE objective.

pub mod contrastive;
pub mod error;
pub mod geometry;
pub mod matcher;
pub mod metrics;
pub mod pose;
pub mod similarity;
pub mod store;
pub mod synthetic;

pub use error::{Error, Result};
