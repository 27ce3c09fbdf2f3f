//! Recurrent models for moving point cloud sequences.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense arrays and reverse-mode differentiation.
//! - [`geometry`]: neighbor queries, farthest point sampling, grouping and
//!   interpolation on 3D point sets.
//! - [`cells`]: the spatiotemporally-local correlation and the PointRNN,
//!   PointGRU and PointLSTM recurrent units built on it.
//! - [`losses`]: Chamfer distance, Earth Mover's distance (exact and
//!   auction-approximated) and their weighted combination.
//! - [`model`] / [`config`]: basic and advanced sequence-to-sequence
//!   architectures for displacement prediction.
//! - [`data`]: moving-digit synthesis, driving-style crop/sample, sequence
//!   file formats and the copy-last baseline.
//! - [`training`] / [`checkpoint`]: Adam with value clipping, free-running
//!   training, evaluation, scene-flow export and binary checkpoints.

pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod tape;
pub mod training;

pub use config::ModelConfig;
pub use data::CloudSequence;
pub use error::{Error, Result};
pub use geometry::PointCloud;
pub use model::Model;
pub use tensor::Tensor;
pub use tape::{Tape, Var};
