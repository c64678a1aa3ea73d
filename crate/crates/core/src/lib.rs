//! Bi-level temporal modeling for supervised action segmentation.
//!
//! A convolutional frame branch and a transformer action branch over a
//! small set of action tokens, coupled by single-head cross-attention,
//! trained with a set-prediction matching objective and evaluated with
//! segmental metrics. See the crate README for the CLI surface.

pub mod action_branch;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod frame_branch;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod npy;
pub mod resampler;
pub mod supervision;
pub mod train;
