//! Multitask residual CNN training for small-sample hyperspectral image
//! classification.
//!
//! One convolutional feature extractor is shared by several classification
//! tasks, each with its own softmax head. Tasks from the same sensor can also
//! share the first (spectral) convolution once their bands are aligned.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: NHWC tensors, reverse-mode differentiation, gradient checks
//! - [`data`]: ENVI cubes, band alignment, splits, patches, synthetic scenes
//! - [`network`]: the multitask residual network
//! - [`optim`]: AdaDelta and the learning-rate schedule
//! - [`trainer`]: two-phase training, snapshots, and voting
//! - [`checkpoint`]: the binary checkpoint container
//! - [`metrics`]: accuracy, aggregation, tables, and maps
//! - [`manifest`] and [`pipeline`]: the configuration file and the protocol
//!   driven by the `hsi-multitask` binary

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
