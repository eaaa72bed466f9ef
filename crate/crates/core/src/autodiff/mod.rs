//! Minimal reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its output
//! value and whatever it needs for the backward rule. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] walks it once in reverse.
//!
//! Training runs in `f32`; gradient verification instantiates the same code
//! in `f64`.

mod adam;
mod graph;
pub mod gradcheck;
mod kernels;
mod tensor;

pub use self::adam::{Adam, AdamConfig};
pub use self::graph::{Gradients, Graph, Mode, Primitive, Var, LEAKY_SLOPE};
pub use self::gradcheck::{finite_diff_check, primitive_suite, FdOptions, FdReport, PrimitiveCheck, TensorReport};
pub use self::tensor::{ParamSet, Real, Tensor};
