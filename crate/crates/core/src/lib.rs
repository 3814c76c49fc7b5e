//! Multimodal crowd counting at desk scale.
//!
//! The crate builds small multi-branch density-estimation networks in which
//! modality-specific branches (RGB, thermal, depth, ...) exchange pyramid
//! contextual information with a shared branch through gated transfers.
//! It also provides density-map ground truth from point annotations, a
//! synthetic RGB/thermal scene generator, GAME/RMSE evaluation, and a
//! deterministic training loop with gradient checking.

pub mod datagen;
pub mod error;
pub mod iadm;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
