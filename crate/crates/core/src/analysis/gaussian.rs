use nalgebra::{DMatrix, SymmetricEigen};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Isotropic Gaussian N(mean, variance·I).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    pub mean: Tensor,
    pub variance: f64,
}

impl GaussianDist {
    pub fn new(mean: Tensor, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidRange(format!("variance {variance} must be positive")));
        }
        Ok(Self { mean, variance })
    }

    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(Tensor::from_vec(vec![mean]), variance)
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: Tensor::zeros(&[dim]), variance: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// KL(p ‖ q) for isotropic Gaussians.
pub fn gaussian_kl(p: &GaussianDist, q: &GaussianDist) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: q.dim() });
    }
    let d = p.dim() as f64;
    let sq: f64 = p.mean.data().iter().zip(q.mean.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(scalar_kl_sum(d, sq, p.variance, q.variance))
}

/// KL between isotropic Gaussians from the dimension, squared mean gap and
/// the two variances.
pub(crate) fn scalar_kl_sum(d: f64, sq_mean_gap: f64, vp: f64, vq: f64) -> f64 {
    let ratio = vp / vq;
    // ratio − 1 − ln ratio, written to stay accurate for ratio ≈ 1
    let shape = (ratio - 1.0) - (ratio - 1.0).ln_1p();
    0.5 * (d * shape + sq_mean_gap / vq)
}

/// The distribution q_T of data N(μ₀, var₀·I) after the forward process.
pub fn diffused_terminal(mu0: &Tensor, var0: f64, schedule: &NoiseSchedule) -> Result<GaussianDist> {
    if !(var0 > 0.0) {
        return Err(Error::InvalidRange(format!("var0 {var0} must be positive")));
    }
    let ab = schedule.alpha_bar(schedule.steps());
    GaussianDist::new(mu0.scale(ab.sqrt()), ab * var0 + (1.0 - ab))
}

/// KL(q_T ‖ N(0, I)): the mismatch between the true terminal distribution
/// and the standard-normal sampling prior.
pub fn diffused_prior_gap(mu0: &Tensor, var0: f64, schedule: &NoiseSchedule) -> Result<f64> {
    let qt = diffused_terminal(mu0, var0, schedule)?;
    gaussian_kl(&qt, &GaussianDist::standard(mu0.len()))
}

/// Gauss–Hermite rule for expectations under N(0, 1): nodes and weights
/// summing to 1 (Golub–Welsch on the probabilists' Hermite Jacobi matrix).
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        let mut j = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64).sqrt();
            j[(k - 1, k)] = b;
            j[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(j);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    /// E[f(X)] for X ~ N(mean, var).
    pub fn expect(&self, mean: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
        let sd = var.sqrt();
        self.nodes.iter().zip(&self.weights).map(|(z, w)| w * f(mean + sd * z)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;

    #[test]
    fn kl_examples() {
        let a = GaussianDist::scalar(0.3, 1.7).unwrap();
        assert_eq!(gaussian_kl(&a, &a).unwrap(), 0.0);
        let p = GaussianDist::scalar(1.0, 1.0).unwrap();
        let q = GaussianDist::scalar(0.0, 1.0).unwrap();
        assert!((gaussian_kl(&p, &q).unwrap() - 0.5).abs() < 1e-15);
        let p = GaussianDist::scalar(0.0, 2.0).unwrap();
        // ½(2 − 1 − ln 2)
        assert!((gaussian_kl(&p, &q).unwrap() - 0.153_426_409_720_027_36).abs() < 1e-14);
        assert!(gaussian_kl(&p, &GaussianDist::standard(2)).is_err());
        assert!(GaussianDist::scalar(0.0, 0.0).is_err());
    }

    #[test]
    fn prior_gap_examples() {
        let s = NoiseSchedule::linear_default();
        assert_eq!(diffused_prior_gap(&Tensor::from_vec(vec![0.0]), 1.0, &s).unwrap(), 0.0);
        let gap = diffused_prior_gap(&Tensor::from_vec(vec![10.0]), 1.0, &s).unwrap();
        let ab = s.alpha_bar(1000);
        assert!((gap - 0.5 * ab * 100.0).abs() < 1e-12);
        assert!((gap - 2.018e-3).abs() < 1e-6, "{gap}");

        let zero = NoiseSchedule::build(ScheduleKind::Linear, 4000, 0.5, 0.5).unwrap();
        assert_eq!(diffused_prior_gap(&Tensor::from_vec(vec![3.0, -1.0]), 0.2, &zero).unwrap(), 0.0);
        assert!(diffused_prior_gap(&Tensor::from_vec(vec![0.0]), 1.5, &s).unwrap() > 0.0);
    }

    #[test]
    fn gap_shrinks_with_more_steps() {
        let mu = Tensor::from_vec(vec![10.0]);
        let gaps: Vec<f64> = [10, 100, 1000]
            .iter()
            .map(|&t| {
                let s = NoiseSchedule::build(ScheduleKind::Linear, t, 1e-4, 0.02).unwrap();
                diffused_prior_gap(&mu, 1.0, &s).unwrap()
            })
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn gauss_hermite_integrates_moments() {
        for n in [8, 64, 128] {
            let gh = GaussHermite::new(n);
            assert!((gh.weights.iter().sum::<f64>() - 1.0).abs() < 1e-13);
            assert!(gh.expect(0.0, 1.0, |x| x).abs() < 1e-12);
            assert!((gh.expect(0.0, 1.0, |x| x * x) - 1.0).abs() < 1e-11);
            assert!((gh.expect(1.0, 4.0, |x| x * x) - 5.0).abs() < 1e-10);
            assert!((gh.expect(0.0, 1.0, |x| x.powi(4)) - 3.0).abs() < 1e-10);
        }
        let gh = GaussHermite::new(64);
        // E[cos X] = e^{-1/2}
        assert!((gh.expect(0.0, 1.0, f64::cos) - (-0.5f64).exp()).abs() < 1e-12);
    }
}
