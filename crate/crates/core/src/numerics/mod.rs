//! Dense tensors, a reverse-mode tape, Adam and gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{CeTarget, Graph, Span, Var};
pub use optim::Adam;
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use rng::{derive_seed, rng_for, Rng};
pub use tensor::{DType, Float, Tensor};
