//! Endpoint-error attribution for deterministic sampling and solver
//! convergence studies, both against the analytic mixture score.

use serde::Serialize;

use crate::analysis::transition::transition_operator;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::sampler::{integrate_from, time_grid, SamplerConfig, SolverKind, REFERENCE_STEPS};
use crate::score::{Gmm, GmmScore, ScoreModel};
use crate::tensor::Tensor;

/// Endpoint errors of controlled ablations, as RMS norms per trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBudget {
    /// Exact model, reference grid, initial state offset by `initial_offset`.
    pub propagated_initial: f64,
    /// Perturbed model, reference grid, exact initial state.
    pub model_error_contrib: f64,
    /// Exact model, configured solver and grid, exact initial state.
    pub truncation_contrib: f64,
    /// Every perturbation at once.
    pub total_endpoint_error: f64,
    /// |G(0,T)|·offset: the linear-part propagation of the initial offset.
    pub linear_initial_prediction: f64,
    /// The initial offset carried through the solver with the noise
    /// prediction held at its ideal-path values (the bracketed model term
    /// removed); equals the linear prediction up to rounding.
    pub open_loop_initial: f64,
    /// ‖e_total − (e_a + e_b + e_c)‖ / ‖e_total‖ over the stacked endpoint errors.
    pub additivity_residual: f64,
    pub initial_offset: f64,
    pub trajectories: usize,
}

fn rms(e: &Tensor) -> f64 {
    (e.sq_norm() / e.rows().max(1) as f64).sqrt()
}

/// Matched starting states x*(T) ~ N(0, I) for the error studies.
pub fn matched_states(n: usize, dim: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, dim], &mut substream(seed, "matched-states"))
}

/// Runs the four ablations of the accumulated-error decomposition with
/// matched starting states drawn from `config.seed`.
///
/// The ideal path x*(τ) is the reference integrator driven by the analytic
/// score of `gmm`; `perturbed_model` stands in for ĥ.
pub fn trajectory_error_decomposition(
    perturbed_model: &dyn ScoreModel,
    config: &SamplerConfig,
    gmm: &Gmm,
    initial_offset: f64,
    schedule: &NoiseSchedule,
) -> Result<ErrorBudget> {
    if matches!(config.solver, SolverKind::Ancestral) {
        return Err(Error::InvalidConfig("error budget needs a deterministic solver".into()));
    }
    if perturbed_model.dim() != gmm.dim() {
        return Err(Error::DimensionMismatch { expected: gmm.dim(), got: perturbed_model.dim() });
    }
    let n = config.num_samples.max(1);
    let exact = GmmScore::new(gmm.clone());
    let x_t = matched_states(n, gmm.dim(), config.seed);
    let x_off = x_t.map(|v| v + initial_offset);

    let run = |x: &Tensor, m: &dyn ScoreModel, solver: SolverKind, steps: usize| -> Result<Tensor> {
        Ok(integrate_from(x.clone(), m, solver, steps, schedule, false)?.0)
    };
    let ideal = run(&x_t, &exact, SolverKind::Reference, REFERENCE_STEPS)?;
    let e_a = run(&x_off, &exact, SolverKind::Reference, REFERENCE_STEPS)?.sub(&ideal)?;
    let e_b = run(&x_t, perturbed_model, SolverKind::Reference, REFERENCE_STEPS)?.sub(&ideal)?;
    let e_c = run(&x_t, &exact, config.solver, config.steps)?.sub(&ideal)?;
    let e_tot = run(&x_off, perturbed_model, config.solver, config.steps)?.sub(&ideal)?;

    let sum = e_a.lin_comb(1.0, &e_b, 1.0)?.lin_comb(1.0, &e_c, 1.0)?;
    let resid = e_tot.sub(&sum)?.norm();
    let additivity_residual = if e_tot.norm() > 0.0 { resid / e_tot.norm() } else { resid };

    // With ε frozen along the ideal path the offset only sees the linear
    // factor √(ᾱ'/ᾱ) of each reference step.
    let grid = time_grid(schedule.horizon(), REFERENCE_STEPS);
    let open_loop = grid.windows(2).fold(initial_offset, |e, w| {
        e * (schedule.alpha_bar_at(w[1]) / schedule.alpha_bar_at(w[0])).sqrt()
    });
    let g = transition_operator(0.0, schedule.horizon(), schedule)?;
    let root_dim = (gmm.dim() as f64).sqrt();

    let budget = ErrorBudget {
        propagated_initial: rms(&e_a),
        model_error_contrib: rms(&e_b),
        truncation_contrib: rms(&e_c),
        total_endpoint_error: rms(&e_tot),
        linear_initial_prediction: g.abs() * initial_offset.abs() * root_dim,
        open_loop_initial: open_loop.abs() * root_dim,
        additivity_residual,
        initial_offset,
        trajectories: n,
    };
    let all = [budget.propagated_initial, budget.model_error_contrib, budget.truncation_contrib, budget.total_endpoint_error];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("error budget".into()));
    }
    Ok(budget)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceStudy {
    pub solver: SolverKind,
    /// (N, RMS endpoint error against the reference integrator).
    pub rows: Vec<(usize, f64)>,
    /// Negated least-squares slope of log₂ error against log₂ N.
    pub slope: f64,
}

pub const MIN_CONVERGENCE_STATES: usize = 32;

/// Measures the empirical order of `solver` on the analytic score of `gmm`
/// using `states` matched starting points (at least 32).
pub fn convergence_order(
    solver: SolverKind,
    gmm: &Gmm,
    schedule: &NoiseSchedule,
    ns: &[usize],
    states: usize,
    seed: u64,
) -> Result<ConvergenceStudy> {
    if ns.len() < 4 || ns.iter().any(|&n| n < 8) {
        return Err(Error::InvalidConfig("need at least four step counts, each >= 8".into()));
    }
    if states < MIN_CONVERGENCE_STATES {
        return Err(Error::InsufficientSamples { needed: MIN_CONVERGENCE_STATES, got: states });
    }
    match solver {
        SolverKind::Reference => return Err(Error::Degenerate("the reference has zero error against itself".into())),
        SolverKind::Ancestral => return Err(Error::InvalidConfig("ancestral sampling has no deterministic order".into())),
        _ => {}
    }
    let exact = GmmScore::new(gmm.clone());
    let x_t = matched_states(states, gmm.dim(), seed);
    let reference = integrate_from(x_t.clone(), &exact, SolverKind::Reference, REFERENCE_STEPS, schedule, false)?.0;
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let out = integrate_from(x_t.clone(), &exact, solver, n, schedule, false)?.0;
        rows.push((n, rms(&out.sub(&reference)?)));
    }
    if rows.iter().any(|&(_, e)| !(e > 0.0)) {
        return Err(Error::Degenerate("zero error: slope undefined".into()));
    }
    let xs: Vec<f64> = rows.iter().map(|&(n, _)| (n as f64).log2()).collect();
    let ys: Vec<f64> = rows.iter().map(|&(_, e)| e.log2()).collect();
    let slope = -least_squares_slope(&xs, &ys);
    Ok(ConvergenceStudy { solver, rows, slope })
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
