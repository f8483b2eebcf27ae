//! Minimal dense-tensor reverse-mode autodiff, sized for LSTM-based VAEs.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_filtered, GradCheckReport};
pub use params::{Init, ParameterStore};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
