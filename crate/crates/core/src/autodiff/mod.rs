//! Exact gradients of scalar losses over flat parameter vectors.

mod check;
mod params;
mod tape;

pub use check::{evaluate, finite_diff_check, value_and_grad, GradResult, ParamVars};
pub use params::{flatten_params, DecayGroup, Layout, NamedTensor, ParamVector, Segment};
pub use tape::{rbf_matrix, Gradients, Tape, Var};
