//! Minimal reverse-mode automatic differentiation for dense f64 networks.
//!
//! Sized for this crate's models rather than generality: dense tensors, a
//! Wengert-list tape, fully connected networks, Adam, finite-difference
//! gradient checking, and a binary checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, OptimState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::gradient_check;
pub use mlp::{Mlp, MlpSpec, MlpVars};
pub use tape::{mask_from, Gradients, Tape, Var};
pub use tensor::{affine_forward, relu_forward, Tensor};
