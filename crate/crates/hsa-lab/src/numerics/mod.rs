//! Minimal reverse-mode differentiation substrate: dense tensors, a tape
//! graph with exactly the primitives the model needs, a named parameter
//! registry, and a finite-difference gradient oracle.

mod element;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use element::Element;
pub use graph::{Graph, NodeId, RopeTable};
pub use params::{ParamEntry, ParamId, ParamSet};
pub use tensor::{max_rel_err, Tensor};
