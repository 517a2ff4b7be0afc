//! Failure rates, Fréchet distance on pluggable features, and correlation
//! coefficients with two-sided t-approximation p-values.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::counting::CountVerdict;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::toyshape::RasterImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureRates {
    /// Counting-ready and hallucinated.
    pub chr: f64,
    /// Not counting-ready.
    pub ncfr: f64,
    /// chr + ncfr.
    pub tfr: f64,
    pub n: usize,
}

pub fn failure_rates(verdicts: &[CountVerdict]) -> Result<FailureRates> {
    if verdicts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = verdicts.len();
    let hallucinated = verdicts.iter().filter(|v| v.counting_ready && v.is_hallucination).count();
    let not_ready = verdicts.iter().filter(|v| !v.counting_ready).count();
    let chr = hallucinated as f64 / n as f64;
    let ncfr = not_ready as f64 / n as f64;
    Ok(FailureRates { chr, ncfr, tfr: chr + ncfr, n })
}

/// Deterministic map from an image to a fixed-length feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn name(&self) -> &str;
    fn extract(&self, image: &RasterImage) -> Vec<f64>;
}

/// Pixels average-pooled onto a `grid`×`grid` lattice (d = grid²).
#[derive(Debug, Clone, Copy)]
pub struct PooledPixels {
    pub grid: usize,
}

impl Default for PooledPixels {
    fn default() -> Self {
        Self { grid: 8 }
    }
}

impl FeatureExtractor for PooledPixels {
    fn dim(&self) -> usize {
        self.grid * self.grid
    }

    fn name(&self) -> &str {
        "pooled"
    }

    fn extract(&self, image: &RasterImage) -> Vec<f64> {
        let g = self.grid;
        let mut sum = vec![0.0; g * g];
        let mut count = vec![0usize; g * g];
        for i in 0..image.height {
            for j in 0..image.width {
                let cell = (i * g / image.height) * g + j * g / image.width;
                sum[cell] += image.get(i, j) as f64;
                count[cell] += 1;
            }
        }
        sum.iter().zip(&count).map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
    }
}

/// Frozen random filter bank: each of `filters` k×k kernels (entries
/// N(0, 1/k²)) is correlated with the image and its responses averaged over a
/// `grid`×`grid` partition of the valid positions; d = filters·grid².
#[derive(Debug, Clone)]
pub struct RandomProjection {
    kernel: usize,
    grid: usize,
    weights: Vec<Vec<f64>>,
}

impl RandomProjection {
    pub const DEFAULT_SEED: u64 = 0x5EED_F1D;

    pub fn new(seed: u64, filters: usize, kernel: usize, grid: usize) -> Self {
        let mut rng = substream(seed, "feature-filters");
        let sd = 1.0 / kernel as f64;
        let weights = (0..filters)
            .map(|_| (0..kernel * kernel).map(|_| sd * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
            .collect();
        Self { kernel, grid, weights }
    }
}

impl Default for RandomProjection {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED, 4, 5, 4)
    }
}

impl FeatureExtractor for RandomProjection {
    fn dim(&self) -> usize {
        self.weights.len() * self.grid * self.grid
    }

    fn name(&self) -> &str {
        "projection"
    }

    fn extract(&self, image: &RasterImage) -> Vec<f64> {
        let k = self.kernel;
        let g = self.grid;
        let (vh, vw) = (image.height.saturating_sub(k - 1), image.width.saturating_sub(k - 1));
        let mut out = vec![0.0; self.dim()];
        let mut count = vec![0usize; g * g];
        for i in 0..vh {
            for j in 0..vw {
                count[(i * g / vh) * g + j * g / vw] += 1;
            }
        }
        for (f, w) in self.weights.iter().enumerate() {
            for i in 0..vh {
                for j in 0..vw {
                    let mut r = 0.0;
                    for a in 0..k {
                        for b in 0..k {
                            r += w[a * k + b] * image.get(i + a, j + b) as f64;
                        }
                    }
                    out[f * g * g + (i * g / vh) * g + j * g / vw] += r;
                }
            }
            for c in 0..g * g {
                if count[c] > 0 {
                    out[f * g * g + c] /= count[c] as f64;
                }
            }
        }
        out
    }
}

pub fn extractor_by_name(name: &str) -> Result<Box<dyn FeatureExtractor>> {
    match name {
        "pooled" => Ok(Box::new(PooledPixels::default())),
        "projection" => Ok(Box::new(RandomProjection::default())),
        other => Err(Error::InvalidConfig(format!("unknown feature extractor '{other}'"))),
    }
}

pub fn extract_features(extractor: &dyn FeatureExtractor, images: &[RasterImage]) -> Vec<Vec<f64>> {
    images.par_iter().map(|img| extractor.extract(img)).collect()
}

fn moments(feats: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = feats.len();
    let mut mean = DVector::zeros(d);
    for f in feats {
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        let c = DVector::from_column_slice(f) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits (unbiased covariance) of two
/// feature sets: |μ₁−μ₂|² + Tr(Σ₁ + Σ₂ − 2(Σ₁^½Σ₂Σ₁^½)^½).
pub fn frechet_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    let d = feats_a.first().or(feats_b.first()).map_or(0, |f| f.len());
    if d == 0 {
        return Err(Error::InsufficientSamples { needed: 2, got: 0 });
    }
    for f in feats_a.iter().chain(feats_b) {
        if f.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: f.len() });
        }
    }
    let got = feats_a.len().min(feats_b.len());
    if got < d + 1 {
        return Err(Error::InsufficientSamples { needed: d + 1, got });
    }
    let (m1, s1) = moments(feats_a, d);
    let (m2, s2) = moments(feats_b, d);
    let r1 = psd_sqrt(&s1);
    let cross = psd_sqrt(&(&r1 * &s2 * &r1));
    let fd = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    if !fd.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    // The matrix square roots leave rounding noise of order ε·scale; clamp it
    // so identical feature sets give exactly zero.
    let scale = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace();
    if fd <= 64.0 * f64::EPSILON * scale {
        return Ok(0.0);
    }
    Ok(fd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub coefficient: f64,
    pub p_value: f64,
    pub n: usize,
}

fn t_test(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if 1.0 - r.abs() <= f64::EPSILON {
        return 0.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch { expected: xs.len(), got: ys.len() });
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::InsufficientSamples { needed: 3, got: n });
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::DegenerateVariance);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(CorrelationResult { coefficient: r, p_value: t_test(r, n), n })
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch { expected: xs.len(), got: ys.len() });
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::toyshape::{CountProfile, CountVector};
    use proptest::prelude::*;

    fn verdict(ready: bool, hallucinated: bool) -> CountVerdict {
        CountVerdict {
            counting_ready: ready,
            counts: CountVector::default(),
            is_hallucination: hallucinated,
            low_confidence: false,
            blob_diagnostics: vec![],
        }
    }

    #[test]
    fn failure_rate_examples() {
        let mut v = vec![verdict(true, false); 30_000];
        for x in v.iter_mut().take(192) {
            x.is_hallucination = true;
        }
        let r = failure_rates(&v).unwrap();
        assert!((r.chr * 100.0 - 0.64).abs() < 1e-12);
        assert_eq!(r.ncfr, 0.0);

        let mut v = vec![verdict(false, false), verdict(false, false)];
        v.extend(vec![verdict(true, true); 3]);
        v.extend(vec![verdict(true, false); 5]);
        let r = failure_rates(&v).unwrap();
        assert_eq!((r.ncfr, r.chr, r.n), (0.2, 0.3, 10));
        assert!((r.tfr - 0.5).abs() < 1e-15);
        assert_eq!(r.tfr, r.chr + r.ncfr);
        assert!(failure_rates(&[]).is_err());
    }

    #[test]
    fn failure_rates_from_judged_images() {
        let p = CountProfile::paper();
        let black = RasterImage::zeros(64, 64);
        let v = crate::counting::judge(&black, &p, None).unwrap();
        let r = failure_rates(&[v]).unwrap();
        assert_eq!((r.chr, r.ncfr), (1.0, 0.0));
    }

    fn gaussian_feats(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| (0..d).map(|_| shift + rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()).collect()
    }

    #[test]
    fn frechet_identity_and_symmetry() {
        let a = gaussian_feats(200, 6, 0.0, 1);
        let b = gaussian_feats(150, 6, 0.3, 2);
        assert!(frechet_distance(&a, &a).unwrap() == 0.0);
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
        assert!(ab > 0.0);
        assert!(matches!(frechet_distance(&a[..6], &b), Err(Error::InsufficientSamples { needed: 7, got: 6 })));
    }

    #[test]
    fn frechet_matched_moments_1d() {
        // {−1, 1} realizes mean 0 and unbiased variance 2; scale to variance 1
        let s = 0.5f64.sqrt();
        let a: Vec<Vec<f64>> = vec![vec![-s], vec![s]];
        let b: Vec<Vec<f64>> = vec![vec![1.0 - s], vec![1.0 + s]];
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    }

    /// Samples whose empirical mean and unbiased covariance are exactly `mean`, `cov`.
    fn exact_samples(mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let d = mean.len();
        let raw = gaussian_feats(n, d, 0.0, seed);
        let (m, s) = moments(&raw, d);
        let whiten = s.cholesky().unwrap().l().try_inverse().unwrap();
        let color = cov.clone().cholesky().unwrap().l();
        raw.iter()
            .map(|f| {
                let z = &whiten * (DVector::from_column_slice(f) - &m);
                (mean + &color * z).iter().copied().collect()
            })
            .collect()
    }

    /// Square root of Σ₁Σ₂'s trace via Denman–Beavers on the product, an
    /// independent route from the eigendecomposition used in the library.
    fn analytic_frechet(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
        let mut y = s1 * s2;
        let mut z = DMatrix::identity(m1.len(), m1.len());
        for _ in 0..60 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            y = (&y + zi) * 0.5;
            z = (&z + yi) * 0.5;
        }
        (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * y.trace()
    }

    #[test]
    fn frechet_matches_closed_form_5d() {
        let mut rng = rng_from_seed(9);
        for trial in 0..5 {
            let mut params = || {
                let a = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
                let cov = &a * a.transpose() + DMatrix::identity(5, 5) * 0.5;
                let mean = DVector::from_fn(5, |_, _| rng.gen_range(-2.0..2.0));
                (mean, cov)
            };
            let (m1, s1) = params();
            let (m2, s2) = params();
            let fa = exact_samples(&m1, &s1, 400, 100 + trial);
            let fb = exact_samples(&m2, &s2, 300, 200 + trial);
            let want = analytic_frechet(&m1, &s1, &m2, &s2);
            let got = frechet_distance(&fa, &fb).unwrap();
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn correlation_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().coefficient - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().coefficient + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().p_value, 0.0);
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::DegenerateVariance)));
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        let xs = [0.5, 1.0, 2.0, 7.0];
        assert!((spearman(&xs, &xs.map(|x: f64| x.exp())).unwrap().coefficient - 1.0).abs() < 1e-15);
        assert!((spearman(&xs, &xs.map(|x| -x)).unwrap().coefficient + 1.0).abs() < 1e-15);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    fn brute_pearson(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let (sx, sy): (f64, f64) = (xs.iter().sum(), ys.iter().sum());
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let syy: f64 = ys.iter().map(|y| y * y).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt()
    }

    fn brute_ranks(xs: &[f64]) -> Vec<f64> {
        xs.iter()
            .map(|&x| {
                let below = xs.iter().filter(|&&y| y < x).count() as f64;
                let equal = xs.iter().filter(|&&y| y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn correlations_match_brute_force() {
        let mut rng = rng_from_seed(21);
        for _ in 0..20 {
            let xs: Vec<f64> = (0..10).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut ys: Vec<f64> = (0..10).map(|_| rng.gen_range(-5.0..5.0)).collect();
            ys[3] = ys[7]; // one tie pair
            let r = pearson(&xs, &ys).unwrap().coefficient;
            assert!((r - brute_pearson(&xs, &ys)).abs() < 1e-12);
            let rho = spearman(&xs, &ys).unwrap().coefficient;
            assert!((rho - brute_pearson(&brute_ranks(&xs), &brute_ranks(&ys))).abs() < 1e-12);
            // without ties the classic 1 − 6Σd²/(n(n²−1)) form applies
            let zs: Vec<f64> = (0..10).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let d2: f64 = brute_ranks(&xs).iter().zip(brute_ranks(&zs)).map(|(a, b)| (a - b).powi(2)).sum();
            assert!((spearman(&xs, &zs).unwrap().coefficient - (1.0 - 6.0 * d2 / 990.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn p_value_known_point() {
        // r = 0.5, n = 10: t = 0.5·√(8/0.75) = 1.63299, two-sided p = 0.14111 (t table, df 8)
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let r = pearson(&xs, &xs).unwrap();
        assert_eq!(r.p_value, 0.0);
        assert!((t_test(0.5, 10) - 0.141_1).abs() < 2e-4);
    }

    #[test]
    fn extractors_are_deterministic_and_sized() {
        let d = crate::toyshape::generate_dataset(3, &CountProfile::paper(), 4, 64).unwrap();
        for e in [extractor_by_name("pooled").unwrap(), extractor_by_name("projection").unwrap()] {
            let f = extract_features(e.as_ref(), &d.images);
            assert!(f.iter().all(|v| v.len() == e.dim() && e.dim() == 64));
            assert_eq!(f, extract_features(e.as_ref(), &d.images));
        }
        let p = PooledPixels::default().extract(&d.images[0]);
        let mean: f64 = d.images[0].pixels.iter().map(|&v| v as f64).sum::<f64>() / 4096.0;
        assert!((p.iter().sum::<f64>() / 64.0 - mean).abs() < 1e-12);
        assert!(extractor_by_name("inception").is_err());
    }

    proptest! {
        #[test]
        fn pearson_affine_invariant(
            pts in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 5..20),
            a in 0.1f64..5.0, b in -3.0f64..3.0,
        ) {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            if let (Ok(r1), Ok(r2)) = (pearson(&xs, &ys), pearson(&xs.iter().map(|x| a * x + b).collect::<Vec<_>>(), &ys)) {
                prop_assert!((r1.coefficient - r2.coefficient).abs() < 1e-9);
            }
        }

        #[test]
        fn spearman_rank_invariant(pts in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 5..20)) {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let warped: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0 * x).collect();
            if let (Ok(r1), Ok(r2)) = (spearman(&xs, &ys), spearman(&warped, &ys)) {
                prop_assert_eq!(r1.coefficient, r2.coefficient);
            }
        }

        #[test]
        fn tfr_is_chr_plus_ncfr(flags in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
            let v: Vec<CountVerdict> = flags.iter().map(|&(r, h)| verdict(r, r && h)).collect();
            let f = failure_rates(&v).unwrap();
            prop_assert_eq!(f.tfr, f.chr + f.ncfr);
            prop_assert!(f.chr >= 0.0 && f.tfr <= 1.0 + 1e-15);
        }
    }
}
