//! Minimal reverse-mode differentiation, MLPs, Adam, and the tensor checkpoint container.

mod adam;
mod archive;
mod mlp;
mod tensor;

pub use adam::{adam_step, lr_schedule, AdamConfig, AdamState};
pub use archive::{Archive, ARCHIVE_MAGIC};
pub use mlp::{mlp_forward, positional_encoding, Activation, Layer, MlpParams, MlpVars};
pub use tensor::{Gradients, Graph, Tensor, Var};
