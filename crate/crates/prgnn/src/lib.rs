//! Edge-weighted graph attention networks with ranking-based node pooling,
//! regularized for score separation and group-level consistency, for
//! classifying brain-connectome graphs and extracting salient-node rankings.
//!
//! The crate is organized around:
//! - [`diffcore`]: dense matrices with reverse-mode differentiation and a
//!   finite-difference gradient checker;
//! - [`graph`]: the brain-graph data type and construction from
//!   correlation matrices;
//! - [`data`]: synthetic cohort generation with planted salient nodes,
//!   dataset persistence and subject-level CV splits;
//! - [`model`]: the two-block attention-convolution + pooling network;
//! - [`loss`]: cross-entropy, score-distance (MMD/BCE) and group-level
//!   consistency losses;
//! - [`train`]: Adam training, cross-validation and epoch reporting;
//! - [`interpret`]: score aggregation, salient-node ranking and kept-set
//!   overlap analysis;
//! - [`cli`]: the command-line front end.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod graph;
pub mod interpret;
pub mod loss;
pub mod model;
pub mod train;

mod util;

pub use error::{Error, Result};
