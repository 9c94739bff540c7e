//! Minimal neural-network toolkit: a gradient tape, parameter stores, layers,
//! Adam, and a checkpoint container.

pub mod checkpoint;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tape;

pub use params::{Adam, ParamId, ParamStore, Session};
pub use tape::{Gradients, LinearMap, Tape, Tensor, Var};
