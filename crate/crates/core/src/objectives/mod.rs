//! Divergences, per-sample training losses and exact objectives.

mod divergence;
mod exact;
mod losses;

pub use divergence::{bregman_density, categorical_kl, cross_entropy, entropy, poisson_kl, Divergence};
pub use exact::{
    batch_mean, compute_gap, elbo, exact_expected_loss, exact_l_kl, exact_l_kl_grad, exact_marginal_kl, exact_marginal_kl_grad,
    mc_marginal_loss, row_kl_direct, Elbo, GapReport, McEstimate, PairDelta, DEFAULT_QUAD_POINTS, ELBO_REL_TOL,
};
pub use losses::{
    decompose_row_kl, k_fn, loss_cond_stable, loss_conditional, loss_kl, mdlm_loss, row_loss, sequence_loss,
    ConditionalRow, LossBreakdown, LossKind,
};
