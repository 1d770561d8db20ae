//! Reverse-mode automatic differentiation for the operator set used by the
//! aggregation module, the depth encoder and the segmentation network.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, grad_check_params, relative_error, resolution_floor, MAX_KINK_FRACTION, MIN_FLOOR, NOISE_ULPS, GradCheckConfig, GradCheckReport, InputReport};
pub use graph::{Activation, Binary, Gradients, Graph, PoolMode, Var};
