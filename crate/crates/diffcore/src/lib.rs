//! Dense row-major arrays with a recording tape for reverse-mode
//! differentiation.
//!
//! The operator set is deliberately small: exactly what a causal
//! decision transformer needs for training and inference. There is no
//! implicit broadcasting; row-wise bias addition and reshapes are explicit
//! ops with their own shape rules.
//!
//! Everything is generic over [`Real`], implemented for `f32` (training and
//! inference) and `f64` (gradient checks).

mod array;
mod error;
mod graph;
mod optim;
mod real;

pub use array::NdArray;
pub use error::{DiffError, Result};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWState};
pub use real::Real;
