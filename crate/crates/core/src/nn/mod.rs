//! Numeric substrate: tensors, a reverse-mode tape, MLPs, Adam and
//! finite-difference gradient checking.

mod checkpoint;
mod gradcheck;
mod graph;
mod mlp;
mod optim;
mod tensor;

pub use checkpoint::{LayerDoc, ParamDoc};
pub use gradcheck::{grad_check, relative_error};
pub use graph::{Activation, Gradients, Graph, Var};
pub use mlp::{Linear, Mlp};
pub use optim::{clip_global_norm, Adam};
pub use tensor::Tensor;
