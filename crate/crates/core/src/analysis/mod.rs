//! Numerical checks of the error decomposition of diffusion sampling.

mod bound;
mod budget;
mod gaussian;
mod transition;

pub use bound::{
    mean_deviation, mean_deviation_coefficient, verify_kl_decomposition, GaussianData, KlDecomposition, PriorKind,
    QUADRATURE_NODES, REFINED_NODES,
};
pub use budget::{
    convergence_order, matched_states, trajectory_error_decomposition, ConvergenceStudy, ErrorBudget,
    MIN_CONVERGENCE_STATES,
};
pub use gaussian::{diffused_prior_gap, diffused_terminal, gaussian_kl, GaussHermite, GaussianDist};
pub use transition::{transition_operator, ConstantRate, LinearRate, RateCurve};
