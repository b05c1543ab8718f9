//! Minimal reverse-mode differentiation over dense `f64` arrays.

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
pub mod ops;
pub mod optim;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{concat_rows, Graph, Tensor};
pub use ops::{conv1x1, cosine, cosine_sim, linear_rows, scaled_softmax};
pub use optim::{cosine_lr, AdamW, Parameter};
