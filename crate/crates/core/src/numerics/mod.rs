//! Tensor type, reverse-mode tape, optimiser and gradient verification.

pub mod gradcheck;
mod graph;
pub mod layers;
pub mod optim;
mod params;
mod tensor;

pub use gradcheck::{check_gradients, finite_diff_gradient, relative_error, GradCheckReport};
pub use graph::{Activation, Gradients, Graph, NodeId};
pub use layers::{lstm_cell, LstmDims, LstmState};
pub use optim::{clip_and_step, AdamConfig, AdamState, StepReport};
pub use params::ParameterStore;
pub use tensor::{dot, sigmoid, Tensor};
