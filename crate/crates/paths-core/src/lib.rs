//! Top-down hierarchical patch selection for pyramidal slide images.
//!
//! A slide is processed coarse to fine. At each magnification a processor
//! contextualises patch embeddings with a recurrent summary of their
//! ancestors, gates them by a learned importance, and aggregates them with a
//! small transformer. The `K` most important patches are then magnified into
//! their children at the next level, so the number of patches touched per
//! level stays bounded by `M²K` regardless of slide size.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod model;
pub mod nn;
pub mod pyramid;
pub mod rng;
pub mod selection;
pub mod survival;
pub mod train;

pub use config::{AblationMode, ContextMode, PathsConfig, SelectionMode};
pub use error::{PathsError, Result};
pub use features::{FeatureGrid, PatchEncoder, PatchRef};
pub use pyramid::{PyramidImage, TissueMask};
