//! Noise schedules, the forward (noising) process and the denoising objective.
//!
//! Discrete quantities follow the usual DDPM indexing: `betas[t - 1]` is β_t
//! for `t ∈ 1..=T` and `alpha_bars[t]` is ᾱ_t with ᾱ_0 = 1.
//!
//! Samplers need ᾱ at non-integer times (ODE grids that do not land on the
//! training steps, midpoint evaluations). We extend the schedule to
//! continuous time by interpolating `ln ᾱ` linearly between integer steps, so
//! every integer time reproduces the discrete table exactly and the induced
//! rate β(τ) = −d ln ᾱ/dτ is piecewise constant.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::score::ScoreModel;
use crate::tensor::Tensor;

pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;
pub const DEFAULT_STEPS: usize = 1000;

const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::InvalidConfig(format!("unknown schedule kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    log_alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule with `steps` diffusion steps.
    ///
    /// The linear kind interpolates β evenly from `beta_min` to `beta_max`.
    /// The cosine kind derives β from the squared-cosine ᾱ curve and clips it
    /// to at most 0.999; the endpoints are validated but otherwise unused.
    pub fn build(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let u = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(f64::MIN_POSITIVE, COSINE_MAX_BETA))
                    .collect()
            }
        };
        Self::from_betas(kind, betas)
    }

    pub fn linear_default() -> Self {
        Self::build(ScheduleKind::Linear, DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule is valid")
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidRange(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut log_alpha_bars = Vec::with_capacity(betas.len() + 1);
        log_alpha_bars.push(0.0);
        let mut acc = 0.0;
        for b in &betas {
            acc += (-b).ln_1p();
            log_alpha_bars.push(acc);
        }
        let alpha_bars = log_alpha_bars.iter().map(|l| l.exp()).collect();
        Ok(Self { kind, betas, alphas, alpha_bars, log_alpha_bars })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn horizon(&self) -> f64 {
        self.steps() as f64
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// ᾱ_0..=ᾱ_T.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// β_t for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_time(&self, tau: f64) -> Result<()> {
        if !(0.0..=self.horizon()).contains(&tau) {
            return Err(Error::TimestepOutOfRange { t: tau, lo: 0.0, hi: self.horizon() });
        }
        Ok(())
    }

    fn segment(&self, tau: f64) -> (usize, f64) {
        let tau = tau.clamp(0.0, self.horizon());
        let k = (tau.floor() as usize).min(self.steps() - 1);
        (k, tau - k as f64)
    }

    /// ln ᾱ(τ) under log-linear interpolation.
    pub fn log_alpha_bar_at(&self, tau: f64) -> f64 {
        let (k, frac) = self.segment(tau);
        let (a, b) = (self.log_alpha_bars[k], self.log_alpha_bars[k + 1]);
        a + frac * (b - a)
    }

    pub fn alpha_bar_at(&self, tau: f64) -> f64 {
        self.log_alpha_bar_at(tau).exp()
    }

    /// Continuous rate β(τ) = −d ln ᾱ/dτ (right-continuous at integers).
    pub fn rate_at(&self, tau: f64) -> f64 {
        let (k, _) = self.segment(tau);
        self.log_alpha_bars[k] - self.log_alpha_bars[k + 1]
    }

    /// ∫_{t1}^{t2} β(τ) dτ, exact for the piecewise-constant rate.
    pub fn integrated_rate(&self, t1: f64, t2: f64) -> f64 {
        self.log_alpha_bar_at(t1) - self.log_alpha_bar_at(t2)
    }

    /// Half log signal-to-noise ratio λ(τ) = ½ ln(ᾱ / (1 − ᾱ)); +∞ at τ = 0.
    pub fn lambda_at(&self, tau: f64) -> f64 {
        let la = self.log_alpha_bar_at(tau);
        // ln(1 - ᾱ) computed without cancellation for ᾱ near 1.
        let l1m = (-la.exp_m1()).ln();
        0.5 * (la - l1m)
    }

    /// Inverse of [`Self::lambda_at`] on `[0, T]`.
    pub fn time_at_lambda(&self, lambda: f64) -> f64 {
        if lambda == f64::INFINITY {
            return 0.0;
        }
        // ln ᾱ = −ln(1 + e^{−2λ})
        let target = -(-2.0 * lambda).exp().ln_1p();
        let lab = &self.log_alpha_bars;
        if target >= lab[0] {
            return 0.0;
        }
        if target <= lab[self.steps()] {
            return self.horizon();
        }
        // lab is strictly decreasing: find k with lab[k] >= target > lab[k+1]
        let k = lab.partition_point(|&v| v >= target) - 1;
        let (a, b) = (lab[k], lab[k + 1]);
        k as f64 + (target - a) / (b - a)
    }

    /// Writes `t,beta,alpha,alpha_bar` rows for t = 0..=T (β_0 = 0 by convention).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "beta", "alpha", "alpha_bar"])?;
        w.write_record(["0", "0", "1", "1"])?;
        for t in 1..=self.steps() {
            w.write_record([
                t.to_string(),
                format!("{:e}", self.beta(t)),
                format!("{:e}", self.alpha(t)),
                format!("{:e}", self.alpha_bar(t)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Positive weighting π(t) of the denoising loss.
#[derive(Clone)]
pub struct WeightFn(Arc<dyn Fn(usize) -> f64 + Send + Sync>);

impl WeightFn {
    pub fn new(f: impl Fn(usize) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn uniform() -> Self {
        Self::new(|_| 1.0)
    }

    pub fn eval(&self, t: usize) -> f64 {
        (self.0)(t)
    }

    /// Checks strict positivity on `1..=steps`.
    pub fn validate(&self, steps: usize) -> Result<()> {
        for t in 1..=steps {
            let w = self.eval(t);
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidRange(format!("weight {w} at t = {t}")));
            }
        }
        Ok(())
    }
}

impl Default for WeightFn {
    fn default() -> Self {
        Self::uniform()
    }
}

impl fmt::Debug for WeightFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("WeightFn(..)")
    }
}

/// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε at an integer step.
pub fn diffuse(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t > schedule.steps() {
        return Err(Error::TimestepOutOfRange { t: t as f64, lo: 0.0, hi: schedule.horizon() });
    }
    let ab = schedule.alpha_bar(t);
    x0.lin_comb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Same as [`diffuse`] at a continuous time.
pub fn diffuse_at(x0: &Tensor, tau: f64, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_time(tau)?;
    let ab = schedule.alpha_bar_at(tau);
    x0.lin_comb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Monte-Carlo estimate of E[π(t)‖ε_θ(x_t, t) − ε‖²] over `batch`.
///
/// Each item draws its own t ~ U{1..T} and then ε ~ N(0, I), in batch order.
pub fn training_loss(
    model: &dyn ScoreModel,
    batch: &[Tensor],
    schedule: &NoiseSchedule,
    weight: &WeightFn,
    rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for x0 in batch {
        if x0.len() != model.dim() {
            return Err(Error::DimensionMismatch { expected: model.dim(), got: x0.len() });
        }
        let t = rng.gen_range(1..=schedule.steps());
        let eps = Tensor::randn(x0.shape(), rng);
        let xt = diffuse(x0, t, &eps, schedule)?;
        let pred = model.predict_noise(&xt, t as f64, schedule)?;
        total += weight.eval(t) * pred.sub(&eps)?.sq_norm();
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::score::{Gmm, GmmScore};

    /// Independent ᾱ_T: plain running product in the obvious loop.
    fn alpha_bar_product(steps: usize, lo: f64, hi: f64) -> f64 {
        let mut p = 1.0;
        for i in 0..steps {
            let b = lo + (hi - lo) * (i as f64) / ((steps - 1) as f64);
            p *= 1.0 - b;
        }
        p
    }

    #[test]
    fn single_step_linear() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert!((s.alpha_bar(1) - 0.5).abs() < 1e-15);
        assert_eq!(s.alpha_bars().len(), 2);
    }

    #[test]
    fn default_linear_terminal_alpha_bar() {
        let s = NoiseSchedule::linear_default();
        let oracle = alpha_bar_product(1000, 1e-4, 0.02);
        // frozen from the product loop: 4.0358e-5
        assert!((oracle - 4.0358e-5).abs() < 1e-8, "{oracle}");
        assert!((s.alpha_bar(1000) - oracle).abs() / oracle < 1e-10);
        assert!(s.alpha_bar(1000) < 1e-3);
    }

    #[test]
    fn rejects_bad_bounds() {
        for (lo, hi) in [(0.0, 0.0), (0.1, 0.05), (0.1, 1.0), (-0.1, 0.2)] {
            assert!(matches!(
                NoiseSchedule::build(ScheduleKind::Linear, 3, lo, hi),
                Err(Error::InvalidRange(_))
            ));
        }
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 0, 0.1, 0.2).is_err());
    }

    #[test]
    fn both_kinds_are_strictly_decreasing() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::build(kind, 1000, 1e-4, 0.02).unwrap();
            assert_eq!(s.betas().len(), 1000);
            assert_eq!(s.alphas().len(), 1000);
            assert_eq!(s.alpha_bars().len(), 1001);
            assert_eq!(s.alpha_bar(0), 1.0);
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]), "{kind}");
            assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        }
    }

    #[test]
    fn continuous_extension_matches_table() {
        let s = NoiseSchedule::linear_default();
        for t in [0usize, 1, 17, 500, 999, 1000] {
            assert!((s.alpha_bar_at(t as f64) - s.alpha_bar(t)).abs() < 1e-15);
        }
        for tau in [0.3, 1.5, 250.25, 999.9] {
            let lam = s.lambda_at(tau);
            assert!((s.time_at_lambda(lam) - tau).abs() < 1e-9, "{tau}");
        }
        assert_eq!(s.time_at_lambda(f64::INFINITY), 0.0);
        assert!((s.rate_at(10.5) - (-(1.0 - s.beta(11)).ln())).abs() < 1e-15);
    }

    #[test]
    fn diffuse_examples() {
        let s = NoiseSchedule::linear_default();
        let x0 = Tensor::from_vec(vec![0.3, -1.2]);
        let eps = Tensor::from_vec(vec![0.5, 0.7]);
        assert_eq!(diffuse(&x0, 0, &eps, &s).unwrap(), x0);

        let zero = Tensor::zeros(&[2]);
        let xt = diffuse(&zero, 400, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(400)).sqrt();
        assert!((xt.data()[0] - k * 0.5).abs() < 1e-15);

        assert!(diffuse(&x0, 1001, &eps, &s).is_err());
        assert!(diffuse(&x0, 3, &Tensor::zeros(&[3]), &s).is_err());
    }

    #[test]
    fn diffuse_quarter_alpha_bar() {
        // ᾱ_t = 0.25 realised by a one-step schedule with β = 0.75.
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1, 0.75, 0.75).unwrap();
        let xt = diffuse(&Tensor::from_vec(vec![1.0]), 1, &Tensor::from_vec(vec![1.0]), &s).unwrap();
        // 0.5 + sqrt(0.75)
        assert!((xt.data()[0] - 1.366_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn marginal_moments_converge() {
        let s = NoiseSchedule::linear_default();
        let x0 = Tensor::from_vec(vec![2.0]);
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        for t in [250usize, 500, 1000] {
            let (mut m, mut m2) = (0.0, 0.0);
            for _ in 0..n {
                let eps = Tensor::randn(&[1], &mut rng);
                let v = diffuse(&x0, t, &eps, &s).unwrap().data()[0];
                m += v;
                m2 += v * v;
            }
            m /= n as f64;
            let var = m2 / n as f64 - m * m;
            let ab = s.alpha_bar(t);
            let se_mean = ((1.0 - ab) / n as f64).sqrt();
            assert!((m - ab.sqrt() * 2.0).abs() < 3.0 * se_mean, "t={t} mean {m}");
            // var of sample variance ≈ 2σ⁴/n
            let se_var = (2.0 / n as f64).sqrt() * (1.0 - ab);
            assert!((var - (1.0 - ab)).abs() < 3.0 * se_var, "t={t} var {var}");
        }
    }

    struct Oracle;
    impl ScoreModel for Oracle {
        fn dim(&self) -> usize {
            1
        }
        fn predict_noise_batch(&self, x: &Tensor, _t: f64, _s: &NoiseSchedule) -> Result<Tensor> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    #[test]
    fn zero_model_loss_is_squared_noise() {
        let s = NoiseSchedule::linear_default();
        let batch = [Tensor::from_vec(vec![0.4])];
        let loss = training_loss(&Oracle, &batch, &s, &WeightFn::uniform(), &mut rng_from_seed(3)).unwrap();
        let mut replay = rng_from_seed(3);
        let _t = replay.gen_range(1..=s.steps());
        let eps = Tensor::randn(&[1], &mut replay);
        assert!((loss - eps.data()[0].powi(2)).abs() < 1e-15);
    }

    #[test]
    fn loss_replays_exactly_with_gmm() {
        let s = NoiseSchedule::linear_default();
        let gmm = Gmm::new(vec![0.5, 0.5], vec![vec![-1.0, 0.5], vec![1.0, -0.5]], vec![0.2, 0.3]).unwrap();
        let model = GmmScore::new(gmm);
        let mut data_rng = rng_from_seed(5);
        let batch: Vec<Tensor> = (0..16).map(|_| Tensor::randn(&[2], &mut data_rng)).collect();
        let w = WeightFn::uniform();
        let loss = training_loss(&model, &batch, &s, &w, &mut rng_from_seed(99)).unwrap();

        // replay: redraw (t, ε) in the same order and evaluate item by item
        let mut rng = rng_from_seed(99);
        let mut acc = 0.0;
        for x0 in &batch {
            let t = rng.gen_range(1..=s.steps());
            let eps = Tensor::randn(&[2], &mut rng);
            let ab = s.alpha_bar(t);
            let xt: Vec<f64> =
                x0.data().iter().zip(eps.data()).map(|(a, e)| ab.sqrt() * a + (1.0 - ab).sqrt() * e).collect();
            let pred = model.predict_noise(&Tensor::from_vec(xt), t as f64, &s).unwrap();
            acc += pred.data().iter().zip(eps.data()).map(|(p, e)| (p - e).powi(2)).sum::<f64>();
        }
        assert!((loss - acc / 16.0).abs() < 1e-12);
        assert!(loss >= 0.0);
    }

    #[test]
    fn weight_fn_validation() {
        assert!(WeightFn::uniform().validate(10).is_ok());
        assert!(WeightFn::new(|t| t as f64 - 5.0).validate(10).is_err());
    }

    #[test]
    fn csv_dump_has_all_rows() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 4, 0.1, 0.4).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("t,beta,alpha,alpha_bar"));
    }
}
