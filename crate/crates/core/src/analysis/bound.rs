//! The KL decomposition bound on 1-D Gaussian data.
//!
//! With q_0 = N(m, v) every marginal q_t and every reverse posterior
//! q(x_{t−1} | x_t) is Gaussian, and the reverse chain driven by the exact
//! noise prediction (optionally biased by a constant) is linear-Gaussian, so
//! the model marginal p_θ(x_0) is available in closed form. The left side
//! KL(q_0 ‖ p_θ(x_0)) is evaluated exactly; the accumulated transition term
//! on the right side is evaluated by Gauss–Hermite quadrature over q(x_t).

use serde::Serialize;

use crate::analysis::gaussian::{scalar_kl_sum, GaussHermite};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const QUADRATURE_NODES: usize = 64;
pub const REFINED_NODES: usize = 128;
const REFINEMENT_TOL: f64 = 1e-10;
const REFINEMENT_FLOOR: f64 = 1e-14;

/// Δμ_t = −β_t/(√(1−β_t)·√(1−ᾱ_t))·Δε_t.
pub fn mean_deviation(delta_eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::TimestepOutOfRange { t: t as f64, lo: 1.0, hi: schedule.horizon() });
    }
    Ok(delta_eps.scale(mean_deviation_coefficient(t, schedule)))
}

pub fn mean_deviation_coefficient(t: usize, schedule: &NoiseSchedule) -> f64 {
    let b = schedule.beta(t);
    -b / ((1.0 - b).sqrt() * (1.0 - schedule.alpha_bar(t)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    /// p_θ(x_T) = N(0, 1).
    Standard,
    /// p_θ(x_T) = q_T, removing the prior gap.
    Exact,
}

/// One-dimensional Gaussian data distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianData {
    pub mean: f64,
    pub var: f64,
}

impl Default for GaussianData {
    /// Unit variance keeps the reverse posterior variance equal to β_t, so an
    /// unbiased model has exact transitions.
    fn default() -> Self {
        Self { mean: 2.0, var: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlDecomposition {
    pub steps: usize,
    pub perturbation: f64,
    pub prior: PriorKind,
    /// KL(q_0 ‖ p_θ(x_0)).
    pub lhs: f64,
    /// prior_term + transition_term.
    pub rhs: f64,
    pub prior_term: f64,
    pub transition_term: f64,
    /// Per-step expected transition KLs, t = 1..=T.
    pub per_step: Vec<f64>,
}

impl KlDecomposition {
    pub fn holds(&self, slack: f64) -> bool {
        self.lhs <= self.rhs + slack
    }
}

fn marginal(data: GaussianData, ab: f64) -> (f64, f64) {
    (ab.sqrt() * data.mean, ab * data.var + 1.0 - ab)
}

/// Evaluates both sides of the decomposition for `schedule`, whose length is T.
///
/// The model reverse step is N(μ_θ(x_t), β_t) with μ_θ built from the exact
/// Gaussian noise prediction plus `perturbation` (a constant bias on ε_θ).
pub fn verify_kl_decomposition(
    schedule: &NoiseSchedule,
    data: GaussianData,
    perturbation: f64,
    prior: PriorKind,
) -> Result<KlDecomposition> {
    if !(data.var > 0.0) {
        return Err(Error::InvalidRange("data variance must be positive".into()));
    }
    let steps = schedule.steps();
    let coarse = GaussHermite::new(QUADRATURE_NODES);
    let fine = GaussHermite::new(REFINED_NODES);

    // Model reverse mean μ_θ(x) = a_t x + b_t.
    let affine = |t: usize| -> (f64, f64) {
        let (alpha, ab) = (schedule.alpha(t), schedule.alpha_bar(t));
        let (m_t, s_t) = marginal(data, ab);
        let c = schedule.beta(t) / (1.0 - ab).sqrt();
        let k = (1.0 - ab).sqrt() / s_t; // ε̂(x) = k (x − m_t)
        let a = (1.0 - c * k) / alpha.sqrt();
        let b = (c * k * m_t - c * perturbation) / alpha.sqrt();
        (a, b)
    };

    let (m_big_t, s_big_t) = marginal(data, schedule.alpha_bar(steps));
    let (prior_mean, prior_var) = match prior {
        PriorKind::Standard => (0.0, 1.0),
        PriorKind::Exact => (m_big_t, s_big_t),
    };
    let prior_term = scalar_kl_sum(1.0, (m_big_t - prior_mean).powi(2), s_big_t, prior_var);

    // Left side: push the prior through the linear-Gaussian model chain.
    let (mut mean, mut var) = (prior_mean, prior_var);
    for t in (1..=steps).rev() {
        let (a, b) = affine(t);
        mean = a * mean + b;
        var = a * a * var + schedule.beta(t);
    }
    let lhs = scalar_kl_sum(1.0, (data.mean - mean).powi(2), data.var, var);

    // Right side: E_{q(x_t)} KL(q(x_{t−1}|x_t) ‖ p_θ(x_{t−1}|x_t)).
    let mut per_step = Vec::with_capacity(steps);
    for t in 1..=steps {
        let (alpha, beta) = (schedule.alpha(t), schedule.beta(t));
        let (m_prev, s_prev) = marginal(data, schedule.alpha_bar(t - 1));
        let (m_t, s_t) = marginal(data, schedule.alpha_bar(t));
        let gain = alpha.sqrt() * s_prev / s_t;
        let post_var = s_prev * beta / s_t;
        let (a, b) = affine(t);
        let integrand = |x: f64| {
            let post_mean = m_prev + gain * (x - alpha.sqrt() * m_prev);
            let model_mean = a * x + b;
            scalar_kl_sum(1.0, (post_mean - model_mean).powi(2), post_var, beta)
        };
        let lo = coarse.expect(m_t, s_t, integrand);
        let hi = fine.expect(m_t, s_t, integrand);
        if (lo - hi).abs() > REFINEMENT_TOL * hi.abs() + REFINEMENT_FLOOR {
            return Err(Error::QuadratureFailure { coarse: lo, fine: hi });
        }
        per_step.push(hi);
    }
    let transition_term: f64 = per_step.iter().sum();
    Ok(KlDecomposition {
        steps,
        perturbation,
        prior,
        lhs,
        rhs: prior_term + transition_term,
        prior_term,
        transition_term,
        per_step,
    })
}
