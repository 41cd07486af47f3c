//! Dynamic 3D Gaussian splatting for scenes with large motion.
//!
//! Moving content is handed between per-segment copies of the foreground
//! Gaussians, and a space-time deformation field refines each frame. The
//! guide in `book/` walks through the stages.

// `!(x > 0.0)` is deliberate: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::type_complexity
)]

pub mod config;
pub mod deform;
pub mod error;
pub mod gradsuite;
pub mod imaging;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod optim;
pub mod pipeline;
pub mod relay;
pub mod render;
pub mod scene;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

// The guide's code samples run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/quickstart.md")]
    struct QuickStart;
    #[doc = include_str!("../../../book/src/scenes.md")]
    struct Scenes;
    #[doc = include_str!("../../../book/src/rendering.md")]
    struct Rendering;
    #[doc = include_str!("../../../book/src/stages.md")]
    struct Stages;
    #[doc = include_str!("../../../book/src/files.md")]
    struct Files;
}
