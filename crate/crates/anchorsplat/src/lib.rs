//! Anchored Gaussian splatting on the CPU: depth-initialized anchors,
//! residual splat decoders, a tile-based differentiable rasterizer, and the
//! training losses and optimizer that tie them together.

pub mod anchors;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod img;
pub mod io;
pub mod losses;
pub mod rasterize;
pub mod scene;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
