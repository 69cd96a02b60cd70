//! One-step search over the architecture distribution: the penalized
//! minibatch-trace objective, straight-through gradients and the normalized
//! update.

mod objective;
mod optimizer;

pub use objective::{
    exterior, grad_alpha_r, objective_r, penalized, penalized_slope, relaxed_grad_alpha, relaxed_objective,
    trace_gate_gradient,
};
pub use optimizer::{
    delta_star, delta_star_mean, nasi_search, nu_fixed, search_labels, Complexity, Normalizer, NuPolicy,
    PenaltyConfig, SearchOutcome, SearchState, StepRecord, NU_SAMPLES, SMALL_SPACE,
};
