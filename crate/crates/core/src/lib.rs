//! Region-based ensemble learning for fine-grained classification.
//!
//! A shared convolutional trunk produces one feature map per image. Each
//! semantic part region is pooled from that map with RoIAlign and scored by
//! its own sub-classifier head; the heads' softmax outputs are summed and the
//! argmax is the final label.

pub mod data;
pub mod detect;
pub mod error;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod roialign;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Real, Tensor};
