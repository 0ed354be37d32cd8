//! Reverse-mode automatic differentiation over dense tensors.

mod gemm;
mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, grad_check_report, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};

pub(crate) use graph::gaussian_bin_mass;
