//! Empirical neural tangent kernels, trace-norm estimates, linearized
//! training dynamics and infinite-width reference kernels.

mod analytic;
mod dynamics;
mod estimates;
mod gram;

pub use analytic::{
    analytic_ntk_relu_mlp, data_agnostic_bound, depth_factor, ntk_width_convergence, prop2_gap_check, relu_covariances,
    relu_layer, GapCheck, WidthDeviation, DISTRIBUTION_TERM_BOUND,
};
pub use dynamics::{
    linearization_gap, linearized_train, mse_trajectory, prop1_leading_bound, train_outputs, LinearizedModel,
    LossTrajectory, TrajectorySource, DIVERGENCE_LOSS,
};
pub use estimates::{approx_trace, batch_grad_norm, shuffled_indices, trace_lower_bounds, TraceEstimates};
pub use gram::{exact_ntk, exact_ntk_capped, trace_norm_exact, NtkGram, NTK_CAP};
