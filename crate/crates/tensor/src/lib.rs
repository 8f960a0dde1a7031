//! Dense `f64` tensors and define-by-run reverse-mode differentiation.
//!
//! The [`Tape`] records operations as they run; [`Tape::backward`] replays
//! them in reverse. Backward passes can themselves be recorded
//! ([`Tape::grad`] with `create_graph`), which gradient penalties need.
//! [`ParameterStore`] holds named parameters with their Adam state and
//! serializes to the FACP checkpoint format.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod params;
pub mod tape;
pub mod tensor;

pub use conv::{ConvGeom, Padding};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, relative_error};
pub use params::{Adam, Checkpoint, GradMap, Graph, Parameter, ParameterStore, Trainable};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
