use rand::Rng as _;
use rand_distr::{Distribution, WeightedIndex};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::score::{check_batch, ScoreModel};
use crate::tensor::Tensor;

/// Isotropic Gaussian mixture q_0 = Σ w_i N(μ_i, v_i I).
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl Gmm {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::InvalidConfig("mixture component lists disagree in length".into()));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidConfig("mixture means must share one dimension".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0)) || ((weights.iter().sum::<f64>()) - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidRange("mixture weights must be positive and sum to 1".into()));
        }
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidRange("mixture variances must be positive".into()));
        }
        Ok(Self { weights, means, variances })
    }

    /// The 1-D two-component mixture used by the convergence and error studies.
    pub fn bimodal_1d() -> Self {
        Self::new(vec![0.3, 0.7], vec![vec![-1.5], vec![1.0]], vec![0.25, 0.16]).expect("valid mixture")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Mixture mean and per-axis variance.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        let mut second = vec![0.0; d];
        for ((w, mu), v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            for j in 0..d {
                mean[j] += w * mu[j];
                second[j] += w * (v + mu[j] * mu[j]);
            }
        }
        let var = second.iter().zip(&mean).map(|(s, m)| s - m * m).collect();
        (mean, var)
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<Tensor> {
        let pick = WeightedIndex::new(&self.weights).expect("weights validated");
        (0..n)
            .map(|_| {
                let i = pick.sample(rng);
                let sd = self.variances[i].sqrt();
                let data = self.means[i]
                    .iter()
                    .map(|m| m + sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                Tensor::from_vec(data)
            })
            .collect()
    }

    /// Component parameters of q_t: means √ᾱ μ_i, variances ᾱ v_i + 1 − ᾱ.
    fn diffused(&self, alpha_bar: f64) -> (f64, Vec<f64>) {
        let scale = alpha_bar.sqrt();
        let vars = self.variances.iter().map(|v| alpha_bar * v + (1.0 - alpha_bar)).collect();
        (scale, vars)
    }

    fn log_terms(&self, x: &[f64], scale: f64, vars: &[f64], out: &mut [f64]) {
        let d = x.len() as f64;
        for i in 0..self.components() {
            let s = vars[i];
            let sq: f64 = x.iter().zip(&self.means[i]).map(|(xv, m)| (xv - scale * m).powi(2)).sum();
            out[i] = self.weights[i].ln() - 0.5 * d * (2.0 * std::f64::consts::PI * s).ln() - 0.5 * sq / s;
        }
    }

    /// ln q_τ(x) of the diffused mixture.
    pub fn log_density(&self, x: &[f64], tau: f64, schedule: &NoiseSchedule) -> f64 {
        let (scale, vars) = self.diffused(schedule.alpha_bar_at(tau));
        let mut terms = vec![0.0; self.components()];
        self.log_terms(x, scale, &vars, &mut terms);
        log_sum_exp(&terms)
    }

    /// ∇ ln q_τ(x), with responsibilities normalised by log-sum-exp.
    pub fn score(&self, x: &[f64], tau: f64, schedule: &NoiseSchedule, out: &mut [f64]) {
        let (scale, vars) = self.diffused(schedule.alpha_bar_at(tau));
        self.score_with(x, scale, &vars, out);
    }

    fn score_with(&self, x: &[f64], scale: f64, vars: &[f64], out: &mut [f64]) {
        let k = self.components();
        let mut terms = vec![0.0; k];
        self.log_terms(x, scale, vars, &mut terms);
        let lse = log_sum_exp(&terms);
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..k {
            let r = (terms[i] - lse).exp();
            for (j, o) in out.iter_mut().enumerate() {
                *o -= r * (x[j] - scale * self.means[i][j]) / vars[i];
            }
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact noise prediction ε̂ = −√(1−ᾱ_τ)·∇ ln q_τ(x) for a Gaussian mixture.
#[derive(Debug, Clone)]
pub struct GmmScore {
    gmm: Gmm,
}

impl GmmScore {
    pub fn new(gmm: Gmm) -> Self {
        Self { gmm }
    }

    pub fn gmm(&self) -> &Gmm {
        &self.gmm
    }
}

impl ScoreModel for GmmScore {
    fn dim(&self) -> usize {
        self.gmm.dim()
    }

    fn predict_noise_batch(&self, x: &Tensor, t: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
        schedule.check_time(t)?;
        let d = self.dim();
        let n = check_batch(x, d)?;
        if !x.all_finite() {
            return Err(Error::NonFinite("score input".into()));
        }
        let ab = schedule.alpha_bar_at(t);
        let (scale, vars) = self.gmm.diffused(ab);
        let k = (1.0 - ab).sqrt();
        let mut out = vec![0.0; n * d];
        for (xi, oi) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            self.gmm.score_with(xi, scale, &vars, oi);
            oi.iter_mut().for_each(|o| *o *= -k);
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}
