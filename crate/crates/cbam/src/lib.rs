//! Channel and spatial attention gates for convolutional feature maps.
//!
//! The crate bundles a minimal NCHW tensor engine with reverse-mode
//! differentiation, the attention modules themselves, tiny residual
//! classification networks, a seeded training and ablation harness, and a
//! Grad-CAM emitter. Everything runs in pure `f64` on the CPU so that every
//! gradient can be audited against central finite differences.

pub mod error;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{GradTape, Gradients, NodeRef};
pub use tensor::Tensor;
