//! Dynamic Gaussian splatting with deformation fields, static/dynamic separation and
//! physically motivated opacity filtering.

pub mod autodiff;
#[cfg(feature = "cli")]
pub mod cli;
pub mod deform;
pub mod error;
pub mod gaussian;
pub mod image;
pub mod opacity;
pub mod render;
pub mod scene_io;
pub mod scenegen;
pub mod separation;
pub mod splat;
pub mod train;

pub use error::{Error, Result};
