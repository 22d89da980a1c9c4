//! The tiny decoder-only transformer and its component registry.

pub mod checkpoint;
mod component;
mod transformer;

pub use component::{ComponentId, ProbeSite, SiteKind, Slot};
pub use transformer::{
    swap_component_weights, ComponentRegistry, ForwardTrace, HiddenCapture, Model, ModelConfig, Pair,
};
