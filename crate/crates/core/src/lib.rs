//! Self-supervised correspondence flow.
//!
//! An encoder is trained to reconstruct video frames by soft-copying
//! quantized colours from a reference frame through a windowed
//! (restricted) attention. Training uses an input bottleneck (channel
//! dropout and colour jitter), a recursive scheduled-sampling objective and
//! a forward-backward cycle. At inference the learned affinities propagate
//! first-frame masks or keypoints through a video, scored with region
//! similarity (J), contour accuracy (F) and PCK.

pub mod attention;
pub mod autodiff;
pub mod colour;
pub mod encoder;
pub mod error;
pub mod io;
pub mod metrics;
pub mod propagation;
pub mod training;

pub use error::{Error, Result};

/// Spatial stride between input pixels and feature cells.
pub const FEATURE_STRIDE: usize = 4;

/// Number of quantized colour classes.
pub const NUM_CLASSES: usize = 16;
