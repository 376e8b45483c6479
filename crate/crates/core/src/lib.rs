//! Attention-guided factorized bilinear pooling for audio-video emotion
//! recognition, built on a small reverse-mode autodiff core.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod dsp;
pub mod error;
pub mod fbp;
pub mod gradcheck;
pub mod labels;
pub mod model;
pub mod optim;
pub mod selfcheck;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Tensor};
