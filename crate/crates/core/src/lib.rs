//! Component-importance guided tool-ability injection on a tiny transformer.
//!
//! The crate bundles a small reverse-mode engine, a decoder-only model whose
//! linear projections are addressable as components, synthetic tasks, gradient
//! importance scoring, hidden-state increment analysis, mixture-of-LoRA
//! adapters with a suppression router, the staged trainer and the evaluation
//! harness.

pub mod error;
pub mod harness;
pub mod icc;
pub mod importance;
pub mod model;
pub mod molora;
pub mod numerics;
pub mod parallel;
pub mod tasks;
pub mod trainer;

pub use error::{CitiError, Result};
