//! Dense arrays with tape-based reverse-mode differentiation.
//!
//! A model is evaluated by recording primitives on a [`Tape`] against the
//! named leaves of a [`ParamStore`]; the recorded tape is the computation
//! graph. [`Tape::gradients`] then returns one gradient per parameter.

mod array;
mod backward;
pub mod checkpoint;
mod gradcheck;
mod gru;
pub(crate) mod linalg;
mod ops;
mod optim;
mod params;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckReport};
pub use gru::gru;
pub use optim::Adam;
pub use params::{Gradients, ParamStore};
pub use tape::{CustomOp, Tape, Var};
