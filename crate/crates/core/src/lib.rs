//! Throttleable neural networks: a small tensor engine, gated modules,
//! training objectives and a utilization controller.

pub mod controller;
pub mod error;
pub mod gating;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod tmodule;
pub mod trainer;

pub use error::{Error, Result};
pub use gating::{GateVector, GatingStrategy, Utilization};
pub use tensor::{Graph, Tensor, Var};
