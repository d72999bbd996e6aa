//! Semantic grid SLAM.
//!
//! An agent on a discrete grid observes labelled objects, turns the
//! detections into an egocentric semantic map, and localizes by correlating
//! rotated copies of that map against an allocentric class-evidence map.
//! An IMU dead-reckoning estimate gates the visual pose. The map itself is
//! grown by a small convolutional LSTM trained with backpropagation through
//! time, or by a leaky-integration baseline.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod mapping;
pub mod metrics;
pub mod observation;
pub mod pipeline;
pub mod pose;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
