//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use graph::{log_sum_exp, sigmoid, softmax_row, Gradients, Graph, Unary, Var, LOG_FLOOR};
pub use params::{ParamGrads, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
