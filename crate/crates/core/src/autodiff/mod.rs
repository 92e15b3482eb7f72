//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is an append-only tape: every primitive computes its forward
//! value when appended, and [`Graph::backward`] walks the tape in reverse,
//! accumulating into the [`ParameterStore`] gradient slots of any parameter
//! leaves it reaches. Random inputs (Gumbel noise) are plain constant leaves.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck, DEFAULT_REL_FLOOR, ROUNDOFF_ULPS};
pub use graph::{
    log_sum_exp, sigmoid, softmax, Gradients, Graph, Node, NodeId, NodeKind, Primitive, LOG_MIN,
    NORMALIZE_EPS,
};
pub use params::{ParamId, Parameter, ParameterStore};
pub use tensor::{Shape, Tensor};
