//! Reverse-process samplers.
//!
//! * `Ancestral`: the stochastic T-step DDPM chain.
//! * `Solver1`: first-order exponential integrator of the probability-flow
//!   ODE (DDIM with η = 0).
//! * `Solver2`: single-step second-order midpoint scheme in half-log-SNR
//!   time λ = ½ ln(ᾱ/(1−ᾱ)) with r = ½ (DPM-Solver-2).
//! * `Reference`: `Solver2` on a [`REFERENCE_STEPS`]-point grid (a first-order
//!   reference at that resolution is too coarse to resolve `Solver2` errors).
//!
//! All ODE solvers run on the uniform grid τ_k = T − kΔt, Δt = T/N.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use crate::score::ScoreModel;
use crate::tensor::Tensor;

pub const REFERENCE_STEPS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Ancestral,
    Solver1,
    Solver2,
    Reference,
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverKind::Ancestral => "ancestral",
            SolverKind::Solver1 => "solver1",
            SolverKind::Solver2 => "solver2",
            SolverKind::Reference => "reference",
        })
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ancestral" | "ddpm" => SolverKind::Ancestral,
            "solver1" | "ddim" => SolverKind::Solver1,
            "solver2" => SolverKind::Solver2,
            "reference" => SolverKind::Reference,
            other => return Err(Error::InvalidConfig(format!("unknown solver {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitNoise {
    /// Fresh standard Gaussian.
    Normal,
    /// A training sample pushed through the forward process to time T.
    Diffused,
}

impl fmt::Display for InitNoise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitNoise::Normal => "normal",
            InitNoise::Diffused => "diffused",
        })
    }
}

impl FromStr for InitNoise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(InitNoise::Normal),
            "diffused" => Ok(InitNoise::Diffused),
            other => Err(Error::InvalidConfig(format!("unknown initial noise {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerConfig {
    pub solver: SolverKind,
    /// Number of steps N; must equal T for the ancestral sampler and is
    /// ignored by the reference integrator.
    pub steps: usize,
    pub initial_noise: InitNoise,
    pub seed: u64,
    pub record_trajectory: bool,
    /// Number of samples drawn in one batch.
    pub num_samples: usize,
}

impl SamplerConfig {
    pub fn new(solver: SolverKind, steps: usize, initial_noise: InitNoise, seed: u64) -> Self {
        Self { solver, steps, initial_noise, seed, record_trajectory: false, num_samples: 1 }
    }

    pub fn with_samples(mut self, n: usize) -> Self {
        self.num_samples = n;
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_trajectory = true;
        self
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::InvalidConfig("num_samples must be positive".into()));
        }
        match self.solver {
            SolverKind::Ancestral if self.steps != schedule.steps() => Err(Error::InvalidConfig(format!(
                "ancestral sampling needs steps = T = {}, got {}",
                schedule.steps(),
                self.steps
            ))),
            SolverKind::Solver1 | SolverKind::Solver2 if self.steps == 0 => {
                Err(Error::InvalidConfig("steps must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Grid size actually integrated.
    pub fn grid_steps(&self) -> usize {
        match self.solver {
            SolverKind::Reference => REFERENCE_STEPS,
            _ => self.steps,
        }
    }
}

/// States along the reverse grid, from τ_0 = T down to τ_N = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub entries: Vec<(f64, Tensor)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes `k,tau,sample,component...` rows, one per sample per grid point.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.entries.first().map(|(_, s)| s.row_len()).unwrap_or(0);
        let mut header = vec!["k".to_string(), "tau".into(), "sample".into(), "norm".into()];
        header.extend((0..d).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (k, (tau, state)) in self.entries.iter().enumerate() {
            for r in 0..state.rows() {
                let row = state.row(r);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut rec = vec![k.to_string(), format!("{tau}"), r.to_string(), format!("{norm:e}")];
                rec.extend(row.iter().map(|v| format!("{v:e}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// `[num_samples, dim]`.
    pub samples: Tensor,
    pub trajectory: Option<Trajectory>,
}

/// τ_k = T − kΔt for k = 0..=N.
pub fn time_grid(horizon: f64, steps: usize) -> Vec<f64> {
    let dt = horizon / steps as f64;
    (0..=steps).map(|k| if k == steps { 0.0 } else { horizon - k as f64 * dt }).collect()
}

/// Initial states for `n` samples.
///
/// Both modes draw the same ε from `rng` first, so a normal and a diffused
/// start with the same seed differ only by the diffused signal. Diffused mode
/// then pairs each sample with a dataset item drawn without replacement
/// (reshuffling once the dataset is exhausted).
pub fn initial_noise(
    mode: InitNoise,
    dataset: &[Tensor],
    schedule: &NoiseSchedule,
    n: usize,
    dim: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let eps = Tensor::randn(&[n, dim], rng);
    match mode {
        InitNoise::Normal => Ok(eps),
        InitNoise::Diffused => {
            if dataset.is_empty() {
                return Err(Error::EmptyDataset);
            }
            if let Some(bad) = dataset.iter().find(|x| x.len() != dim) {
                return Err(Error::DimensionMismatch { expected: dim, got: bad.len() });
            }
            let ab = schedule.alpha_bar(schedule.steps());
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let mut order: Vec<usize> = Vec::with_capacity(n);
            while order.len() < n {
                let mut pass: Vec<usize> = (0..dataset.len()).collect();
                pass.shuffle(rng);
                order.extend(pass);
            }
            let mut out = eps.into_data();
            for (r, &idx) in order.iter().take(n).enumerate() {
                for (o, &x0) in out[r * dim..(r + 1) * dim].iter_mut().zip(dataset[idx].data()) {
                    *o = a * x0 + b * *o;
                }
            }
            Tensor::new(vec![n, dim], out)
        }
    }
}

/// One DDPM reverse update given the noise prediction and the injected noise:
/// x_{t−1} = x_t/√α_t − β_t/(√α_t √(1−ᾱ_t))·ε_θ + √β_t·z.
pub fn ancestral_update(x: &[f64], eps: &[f64], z: Option<&[f64]>, beta: f64, alpha_bar: f64, out: &mut [f64]) {
    let sa = (1.0 - beta).sqrt();
    let c_x = 1.0 / sa;
    let c_e = beta / (sa * (1.0 - alpha_bar).sqrt());
    let c_z = beta.sqrt();
    for i in 0..x.len() {
        let noise = z.map_or(0.0, |z| z[i]);
        out[i] = c_x * x[i] - c_e * eps[i] + c_z * noise;
    }
}

/// One ancestral step from integer time `t` to `t − 1`; no noise is added at t = 1.
pub fn ancestral_step(
    x: &Tensor,
    t: usize,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::TimestepOutOfRange { t: t as f64, lo: 1.0, hi: schedule.horizon() });
    }
    let eps = model.predict_noise_batch(x, t as f64, schedule)?;
    let z = (t > 1).then(|| Tensor::randn(x.shape(), rng));
    let mut out = vec![0.0; x.len()];
    ancestral_update(
        x.data(),
        eps.data(),
        z.as_ref().map(|z| z.data()),
        schedule.beta(t),
        schedule.alpha_bar(t),
        &mut out,
    );
    Tensor::new(x.shape().to_vec(), out)
}

/// DDIM / first-order update between cumulative signal levels:
/// x' = √(ᾱ'/ᾱ)·(x − √(1−ᾱ)·ε) + √(1−ᾱ')·ε.
pub fn solver1_update(x: &[f64], eps: &[f64], ab_from: f64, ab_to: f64, out: &mut [f64]) {
    let ratio = (ab_to / ab_from).sqrt();
    let s_from = (1.0 - ab_from).sqrt();
    let s_to = (1.0 - ab_to).sqrt();
    for i in 0..x.len() {
        out[i] = ratio * (x[i] - s_from * eps[i]) + s_to * eps[i];
    }
}

/// Adjacent-step DDIM in expanded form:
/// x_{t−1} = x_t/√α_t − (√(1−ᾱ_t)/√α_t − √(1−ᾱ_{t−1}))·ε.
pub fn solver1_update_expanded(x: &[f64], eps: &[f64], alpha: f64, ab: f64, ab_prev: f64, out: &mut [f64]) {
    let c = ddim_eps_coefficient(alpha, ab, ab_prev);
    let sa = alpha.sqrt();
    for i in 0..x.len() {
        out[i] = x[i] / sa - c * eps[i];
    }
}

/// ε_θ coefficient of the adjacent DDIM step.
pub fn ddim_eps_coefficient(alpha: f64, ab: f64, ab_prev: f64) -> f64 {
    (1.0 - ab).sqrt() / alpha.sqrt() - (1.0 - ab_prev).sqrt()
}

/// ε_θ coefficient of the DDPM mean, (1 − α_t)/(√α_t √(1−ᾱ_t)).
pub fn ddpm_eps_coefficient(alpha: f64, ab: f64) -> f64 {
    (1.0 - alpha) / (alpha.sqrt() * (1.0 - ab).sqrt())
}

fn check_step(t_from: f64, t_to: f64, schedule: &NoiseSchedule) -> Result<()> {
    schedule.check_time(t_from)?;
    schedule.check_time(t_to)?;
    if t_to > t_from {
        return Err(Error::InvalidRange(format!("reverse step must go backwards: {t_from} -> {t_to}")));
    }
    Ok(())
}

pub fn solver1_step(
    x: &Tensor,
    t_from: f64,
    t_to: f64,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    check_step(t_from, t_to, schedule)?;
    if t_from == t_to {
        return Ok(x.clone());
    }
    let eps = model.predict_noise_batch(x, t_from, schedule)?;
    let mut out = vec![0.0; x.len()];
    solver1_update(x.data(), eps.data(), schedule.alpha_bar_at(t_from), schedule.alpha_bar_at(t_to), &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

/// Intermediate time of the second-order step.
///
/// The midpoint in λ with r = ½. When the target is τ = 0 (ᾱ = 1, λ = +∞)
/// the λ-midpoint degenerates to the endpoint, so that final step takes the
/// midpoint in σ/α = e^{−λ} instead.
pub fn solver2_midpoint(t_from: f64, t_to: f64, schedule: &NoiseSchedule) -> f64 {
    let l_from = schedule.lambda_at(t_from);
    let l_to = schedule.lambda_at(t_to);
    let l_mid = if l_to.is_finite() {
        l_from + 0.5 * (l_to - l_from)
    } else {
        l_from + std::f64::consts::LN_2
    };
    schedule.time_at_lambda(l_mid).clamp(t_to, t_from)
}

pub fn solver2_step(
    x: &Tensor,
    t_from: f64,
    t_to: f64,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    check_step(t_from, t_to, schedule)?;
    if t_from == t_to {
        return Ok(x.clone());
    }
    let t_mid = solver2_midpoint(t_from, t_to, schedule);
    let (ab_from, ab_mid, ab_to) =
        (schedule.alpha_bar_at(t_from), schedule.alpha_bar_at(t_mid), schedule.alpha_bar_at(t_to));
    let eps = model.predict_noise_batch(x, t_from, schedule)?;
    let mut u = vec![0.0; x.len()];
    solver1_update(x.data(), eps.data(), ab_from, ab_mid, &mut u);
    let u = Tensor::new(x.shape().to_vec(), u)?;
    let eps_mid = model.predict_noise_batch(&u, t_mid, schedule)?;
    let mut out = vec![0.0; x.len()];
    solver1_update(x.data(), eps_mid.data(), ab_from, ab_to, &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

/// Integrates from a given initial state with a deterministic solver.
pub fn integrate_from(
    x_init: Tensor,
    model: &dyn ScoreModel,
    solver: SolverKind,
    steps: usize,
    schedule: &NoiseSchedule,
    record: bool,
) -> Result<(Tensor, Option<Trajectory>)> {
    let (solver, steps) = match solver {
        SolverKind::Reference => (SolverKind::Solver2, REFERENCE_STEPS),
        SolverKind::Ancestral => {
            return Err(Error::InvalidConfig("ancestral sampling is stochastic; use sample()".into()))
        }
        s => (s, steps),
    };
    if steps == 0 {
        return Err(Error::InvalidConfig("steps must be positive".into()));
    }
    let grid = time_grid(schedule.horizon(), steps);
    let mut traj = record.then(|| vec![(grid[0], x_init.clone())]);
    let mut x = x_init;
    for k in 0..steps {
        x = match solver {
            SolverKind::Solver1 => solver1_step(&x, grid[k], grid[k + 1], model, schedule)?,
            _ => solver2_step(&x, grid[k], grid[k + 1], model, schedule)?,
        };
        if !x.all_finite() {
            return Err(Error::NonFiniteState { step: k + 1 });
        }
        if let Some(t) = traj.as_mut() {
            t.push((grid[k + 1], x.clone()));
        }
    }
    Ok((x, traj.map(|entries| Trajectory { entries })))
}

/// Runs the configured sampler and returns `[num_samples, dim]` outputs.
pub fn sample(
    model: &dyn ScoreModel,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    dataset_for_diffused: &[Tensor],
) -> Result<SampleOutput> {
    config.validate(schedule)?;
    let dim = model.dim();
    let mut init_rng = substream(config.seed, "initial-noise");
    let x0 = initial_noise(config.initial_noise, dataset_for_diffused, schedule, config.num_samples, dim, &mut init_rng)?;
    match config.solver {
        SolverKind::Ancestral => {
            let mut rng = substream(config.seed, "ancestral");
            let steps = schedule.steps();
            let mut traj = config.record_trajectory.then(|| vec![(steps as f64, x0.clone())]);
            let mut x = x0;
            for t in (1..=steps).rev() {
                x = ancestral_step(&x, t, model, schedule, &mut rng)?;
                if !x.all_finite() {
                    return Err(Error::NonFiniteState { step: steps + 1 - t });
                }
                if let Some(tr) = traj.as_mut() {
                    tr.push(((t - 1) as f64, x.clone()));
                }
            }
            Ok(SampleOutput { samples: x, trajectory: traj.map(|entries| Trajectory { entries }) })
        }
        solver => {
            let (samples, trajectory) =
                integrate_from(x0, model, solver, config.steps, schedule, config.record_trajectory)?;
            Ok(SampleOutput { samples, trajectory })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::rng::rng_from_seed;
    use crate::score::{Gmm, GmmScore};
    use rand::Rng as _;

    struct Constant(f64, usize);
    impl ScoreModel for Constant {
        fn dim(&self) -> usize {
            self.1
        }
        fn predict_noise_batch(&self, x: &Tensor, _t: f64, _s: &NoiseSchedule) -> Result<Tensor> {
            Ok(Tensor::filled(x.shape(), self.0))
        }
    }

    #[test]
    fn ancestral_update_examples() {
        let mut out = [0.0];
        // ε_θ = 0 and z = 0: pure rescale
        ancestral_update(&[2.0], &[0.0], Some(&[0.0]), 0.02, 0.25, &mut out);
        assert!((out[0] - 2.0 / 0.98f64.sqrt()).abs() < 1e-15);
        // β → 0 collapses to the identity
        ancestral_update(&[1.5], &[0.3], Some(&[0.7]), 0.0, 0.25, &mut out);
        assert_eq!(out[0], 1.5);
        // β=0.02, ᾱ=0.25, x=1, ε=0.2, z=0; frozen from an independent calculator
        ancestral_update(&[1.0], &[0.2], None, 0.02, 0.25, &mut out);
        let expect = 1.0 / 0.98f64.sqrt() - 0.02 / (0.98f64.sqrt() * 0.75f64.sqrt()) * 0.2;
        assert!((out[0] - expect).abs() < 1e-15);
        assert!((out[0] - 1.005_486_849_804_052).abs() < 1e-12, "{}", out[0]);
    }

    #[test]
    fn solver1_update_examples() {
        let mut out = [0.0];
        solver1_update(&[0.7], &[0.4], 0.3, 0.3, &mut out);
        assert!((out[0] - 0.7).abs() < 1e-15);
        solver1_update(&[1.0], &[0.2], 0.25, 0.5, &mut out);
        let expect = 2f64.sqrt() * (1.0 - 0.75f64.sqrt() * 0.2) + 0.5f64.sqrt() * 0.2;
        assert!((out[0] - expect).abs() < 1e-15);
        assert!((out[0] - 1.310_685_944_332_087).abs() < 1e-12, "{}", out[0]);
    }

    #[test]
    fn factored_and_expanded_ddim_agree() {
        let s = NoiseSchedule::linear_default();
        let mut rng = rng_from_seed(8);
        for _ in 0..1000 {
            let t = rng.gen_range(1..=s.steps());
            let x: f64 = rng.gen_range(-5.0..5.0);
            let e: f64 = rng.gen_range(-5.0..5.0);
            let (mut a, mut b) = ([0.0], [0.0]);
            solver1_update(&[x], &[e], s.alpha_bar(t), s.alpha_bar(t - 1), &mut a);
            solver1_update_expanded(&[x], &[e], s.alpha(t), s.alpha_bar(t), s.alpha_bar(t - 1), &mut b);
            assert!((a[0] - b[0]).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn ddim_is_not_noise_stripped_ddpm() {
        let s = NoiseSchedule::linear_default();
        for t in 2..=s.steps() {
            let c_ddim = ddim_eps_coefficient(s.alpha(t), s.alpha_bar(t), s.alpha_bar(t - 1));
            let c_ddpm = ddpm_eps_coefficient(s.alpha(t), s.alpha_bar(t));
            assert!((c_ddim - c_ddpm).abs() > 1e-9 * c_ddpm.abs(), "t={t}");
        }
        // at t = 1 (ᾱ_0 = 1) the two coincide
        let c1 = ddim_eps_coefficient(s.alpha(1), s.alpha_bar(1), 1.0);
        assert!((c1 - ddpm_eps_coefficient(s.alpha(1), s.alpha_bar(1))).abs() < 1e-12);
    }

    #[test]
    fn solver2_reduces_to_solver1_for_constant_model() {
        let s = NoiseSchedule::linear_default();
        let m = Constant(0.37, 3);
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        for (a, b) in [(1000.0, 960.0), (40.0, 0.0), (333.3, 250.1)] {
            let y1 = solver1_step(&x, a, b, &m, &s).unwrap();
            let y2 = solver2_step(&x, a, b, &m, &s).unwrap();
            assert_eq!(y1, y2);
        }
    }

    #[test]
    fn zero_length_steps_are_identity() {
        let s = NoiseSchedule::linear_default();
        let m = Constant(1.0, 1);
        let x = Tensor::from_vec(vec![0.25]);
        assert_eq!(solver1_step(&x, 10.0, 10.0, &m, &s).unwrap(), x);
        assert_eq!(solver2_step(&x, 10.0, 10.0, &m, &s).unwrap(), x);
        assert!(solver1_step(&x, 10.0, 20.0, &m, &s).is_err());
    }

    #[test]
    fn midpoint_lies_inside_the_step() {
        let s = NoiseSchedule::linear_default();
        for (a, b) in [(1000.0, 975.0), (25.0, 0.0), (500.0, 499.0)] {
            let m = solver2_midpoint(a, b, &s);
            assert!(m < a && m > b, "{a}->{b}: {m}");
        }
    }

    #[test]
    fn grid_and_trajectory() {
        let g = time_grid(1000.0, 25);
        assert_eq!(g.len(), 26);
        assert_eq!(g[0], 1000.0);
        assert_eq!(g[25], 0.0);
        assert!(g.windows(2).all(|w| (w[0] - w[1] - 40.0).abs() < 1e-9));

        let s = NoiseSchedule::linear_default();
        let m = GmmScore::new(Gmm::bimodal_1d());
        let cfg = SamplerConfig::new(SolverKind::Solver1, 25, InitNoise::Normal, 3).recording().with_samples(4);
        let out = sample(&m, &cfg, &s, &[]).unwrap();
        let tr = out.trajectory.unwrap();
        assert_eq!(tr.len(), 26);
        assert!(tr.entries.windows(2).all(|w| w[1].0 < w[0].0));
        assert_eq!(tr.entries.last().unwrap().1, out.samples);
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 26 * 4);
    }

    #[test]
    fn deterministic_solvers_are_bit_identical() {
        let s = NoiseSchedule::linear_default();
        let m = GmmScore::new(Gmm::bimodal_1d());
        for solver in [SolverKind::Solver1, SolverKind::Solver2, SolverKind::Reference] {
            let cfg = SamplerConfig::new(solver, 16, InitNoise::Normal, 77).with_samples(8);
            let a = sample(&m, &cfg, &s, &[]).unwrap().samples;
            let b = sample(&m, &cfg, &s, &[]).unwrap().samples;
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn config_validation() {
        let s = NoiseSchedule::linear_default();
        let m = Constant(0.0, 1);
        let bad = SamplerConfig::new(SolverKind::Ancestral, 50, InitNoise::Normal, 0);
        assert!(sample(&m, &bad, &s, &[]).is_err());
        let diffused = SamplerConfig::new(SolverKind::Solver1, 5, InitNoise::Diffused, 0);
        assert!(matches!(sample(&m, &diffused, &s, &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn normal_noise_is_reproducible() {
        let s = NoiseSchedule::linear_default();
        let a = initial_noise(InitNoise::Normal, &[], &s, 3, 2, &mut rng_from_seed(1)).unwrap();
        let b = initial_noise(InitNoise::Normal, &[], &s, 3, 2, &mut rng_from_seed(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diffused_noise_without_signal_is_normal() {
        // ᾱ_T underflows to 0 for a long schedule with large β
        let s = NoiseSchedule::build(ScheduleKind::Linear, 4000, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(s.steps()), 0.0);
        let data = [Tensor::from_vec(vec![50.0])];
        let a = initial_noise(InitNoise::Diffused, &data, &s, 5, 1, &mut rng_from_seed(2)).unwrap();
        let b = initial_noise(InitNoise::Normal, &data, &s, 5, 1, &mut rng_from_seed(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diffused_noise_mean() {
        let s = NoiseSchedule::linear_default();
        let ab = s.alpha_bar(1000);
        let data = [Tensor::from_vec(vec![10.0])];
        let n = 100_000;
        let x = initial_noise(InitNoise::Diffused, &data, &s, n, 1, &mut rng_from_seed(12)).unwrap();
        let mean = x.data().iter().sum::<f64>() / n as f64;
        let se = ((1.0 - ab) / n as f64).sqrt();
        assert!((ab.sqrt() * 10.0 - 0.0635).abs() < 1e-3);
        assert!((mean - ab.sqrt() * 10.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn diffused_pairing_is_without_replacement() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1, 0.5, 0.5).unwrap();
        // with β = 0.5 and T = 1 the signal is √0.5·x0, large enough to identify items
        let data: Vec<Tensor> = (0..6).map(|i| Tensor::from_vec(vec![1000.0 * i as f64])).collect();
        let x = initial_noise(InitNoise::Diffused, &data, &s, 6, 1, &mut rng_from_seed(5)).unwrap();
        let mut ids: Vec<i64> = x.data().iter().map(|v| (v / (1000.0 * 0.5f64.sqrt())).round() as i64).collect();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn solver1_with_full_grid_tracks_reference() {
        let s = NoiseSchedule::linear_default();
        let m = GmmScore::new(Gmm::bimodal_1d());
        let x = initial_noise(InitNoise::Normal, &[], &s, 16, 1, &mut rng_from_seed(21)).unwrap();
        let (a, _) = integrate_from(x.clone(), &m, SolverKind::Solver1, 1000, &s, false).unwrap();
        let (r, _) = integrate_from(x.clone(), &m, SolverKind::Reference, 0, &s, false).unwrap();
        let (c, _) = integrate_from(x, &m, SolverKind::Solver1, 100, &s, false).unwrap();
        let fine = a.sub(&r).unwrap().max_abs();
        let coarse = c.sub(&r).unwrap().max_abs();
        assert!(fine < coarse / 5.0, "fine {fine} coarse {coarse}");
        assert!(fine < 5e-3, "{fine}");
    }

    #[test]
    fn ancestral_matches_mixture_moments() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 200, 1e-4, 0.1).unwrap();
        let gmm = Gmm::bimodal_1d();
        let m = GmmScore::new(gmm.clone());
        let n = 10_000;
        let cfg = SamplerConfig::new(SolverKind::Ancestral, 200, InitNoise::Normal, 9).with_samples(n);
        let out = sample(&m, &cfg, &s, &[]).unwrap().samples;
        let xs = out.data();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (mu, v) = gmm.moments();
        let fourth: f64 = {
            // central fourth moment of the mixture for the variance standard error
            let w = gmm.weights();
            let mut acc = 0.0;
            for i in 0..2 {
                let d = gmm.means()[i][0] - mu[0];
                let vi = gmm.variances()[i];
                acc += w[i] * (d.powi(4) + 6.0 * d * d * vi + 3.0 * vi * vi);
            }
            acc
        };
        let se_mean = (v[0] / n as f64).sqrt();
        let se_var = ((fourth - v[0] * v[0]) / n as f64).sqrt();
        assert!((mean - mu[0]).abs() < 3.0 * se_mean, "mean {mean} vs {}", mu[0]);
        assert!((var - v[0]).abs() < 3.0 * se_var, "var {var} vs {}", v[0]);
    }
}
