pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod prompt;
pub mod rng;
pub mod scpt;
pub mod tensor;
pub mod train;
pub mod visual;

pub use autodiff::{grad_check, GradCheckReport, Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
