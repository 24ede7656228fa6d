//! Anchor-guided zero-shot anomaly segmentation at desk scale.
pub mod agmd;
pub mod encoders;
pub mod gradcheck;
pub mod image;
pub mod instruct;
pub mod kernel;
pub mod lm;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod seed;
pub mod spam;
pub mod synth;
pub mod train;
pub mod vocab;

pub use image::{Image, ImageError, Mask};
pub use kernel::{AttnMask, Graph, KernelError, ParamId, Tensor, Var};
