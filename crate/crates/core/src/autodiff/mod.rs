//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod params;
mod suite;
mod tensor;

pub use gradcheck::{
    finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck,
};
pub use graph::{Fault, Graph, NodeId, OpKind};
pub use params::{
    flatten_grads, grad_dot, grad_norm, GradLayout, GradVector, LayoutEntry, Param, ParamGrads,
    ParamId, ParamSet, Partition,
};
pub use suite::{op_gradcheck_suite, OpCheck, OP_NAMES};
pub use tensor::TensorValue;
