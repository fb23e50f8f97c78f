//! Gaussian class statistics: estimation, the running shared covariance,
//! jittered Cholesky, sampling and closed-form divergences.

mod divergence;

pub use divergence::{divergence_grad, gaussian_divergence, DivergenceGrad, DivergenceKind};

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{LdcError, Result};
use crate::linalg::{cholesky, Matrix};
use crate::scalar::Real;

/// Smallest non-zero jitter tried by default when factoring covariances.
pub const DEFAULT_JITTER: f64 = 1e-10;

/// Mean vector and covariance matrix of one class distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats<T> {
    pub mean: Vec<T>,
    pub cov: Matrix<T>,
}

impl<T: Real> GaussianStats<T> {
    pub fn new(mean: Vec<T>, cov: Matrix<T>) -> Result<Self> {
        if cov.rows() != mean.len() || cov.cols() != mean.len() {
            return Err(LdcError::DimensionMismatch {
                expected: mean.len(),
                found: cov.rows(),
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// The single stored covariance together with the number of classes it
/// summarizes. Its size depends on the feature dimension only.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedCovariance<T> {
    pub sigma: Matrix<T>,
    pub n_classes: usize,
}

impl<T: Real> SharedCovariance<T> {
    /// No classes seen yet.
    pub fn empty(dim: usize) -> Self {
        Self {
            sigma: Matrix::zeros(dim, dim),
            n_classes: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma.rows()
    }
}

/// Labelled feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> SampleSet<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(LdcError::DimensionMismatch {
                expected: features.rows(),
                found: labels.len(),
            });
        }
        if !features.is_finite() {
            return Err(LdcError::NonFinite);
        }
        Ok(Self { features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Matrix::zeros(0, dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Row indices carrying `label`, in order.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == label).then_some(i))
            .collect()
    }

    pub fn class_rows(&self, label: usize) -> Matrix<T> {
        self.features.select_rows(&self.indices_of(label))
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenates two sets with equal feature dimension.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            features: self.features.vstack(&other.features)?,
            labels,
        })
    }
}

/// Sample mean and population (divisor `n`) covariance of the rows.
pub fn estimate_mean_cov<T: Real>(samples: &Matrix<T>) -> Result<GaussianStats<T>> {
    let (n, d) = samples.shape();
    if n == 0 || d == 0 {
        return Err(LdcError::EmptyInput);
    }
    if !samples.is_finite() {
        return Err(LdcError::NonFinite);
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut mean = vec![T::zero(); d];
    for row in samples.row_iter() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_n);
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![T::zero(); d];
    for row in samples.row_iter() {
        for ((c, &x), &m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] * inv_n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(GaussianStats { mean, cov })
}

/// Folds the classes of a new session into the shared covariance:
/// `Σ_t = Σ_{t-1}·N_{t-1}/N_t + C·(N_t − N_{t-1})/N_t`, where `C` is the
/// mean of the new classes' covariances.
pub fn update_shared_cov<T: Real>(
    prev: &SharedCovariance<T>,
    new_class_samples: &[Matrix<T>],
) -> Result<SharedCovariance<T>> {
    if new_class_samples.is_empty() {
        return Err(LdcError::EmptyInput);
    }
    let d = prev.dim();
    let mut mean_cov = Matrix::zeros(d, d);
    for (k, samples) in new_class_samples.iter().enumerate() {
        if samples.cols() != d {
            return Err(LdcError::DimensionMismatch {
                expected: d,
                found: samples.cols(),
            });
        }
        if samples.rows() == 1 {
            warn!("class {k} of the session has a single sample; it contributes a zero covariance");
        }
        let stats = estimate_mean_cov(samples)?;
        mean_cov.axpy(T::one(), &stats.cov)?;
    }
    let n_new = new_class_samples.len();
    let mean_cov = mean_cov.scale(T::one() / T::from_usize_lossy(n_new));
    let total = prev.n_classes + n_new;
    let w_prev = T::from_usize_lossy(prev.n_classes) / T::from_usize_lossy(total);
    let w_new = T::from_usize_lossy(n_new) / T::from_usize_lossy(total);
    let sigma = Matrix::from_fn(d, d, |i, j| {
        prev.sigma[(i, j)] * w_prev + mean_cov[(i, j)] * w_new
    })
    .symmetrize();
    Ok(SharedCovariance {
        sigma,
        n_classes: total,
    })
}

/// Cholesky factor of `cov + εI` together with the `ε` that made it succeed.
#[derive(Clone, Debug)]
pub struct JitteredCholesky<T> {
    pub factor: Matrix<T>,
    pub jitter: T,
}

/// Factors a symmetric PSD matrix, trying the jitter schedule
/// `0, j, 10j, 100j, …` up to `max(1e-2·tr(cov)/d, j)`.
pub fn cholesky_psd<T: Real>(cov: &Matrix<T>, jitter_start: T) -> Result<JitteredCholesky<T>> {
    if !cov.is_square() {
        return Err(LdcError::DimensionMismatch {
            expected: cov.rows(),
            found: cov.cols(),
        });
    }
    if !cov.is_finite() {
        return Err(LdcError::NonFinite);
    }
    if !cov.is_symmetric(T::lit(1e-9)) {
        return Err(LdcError::NotPsd);
    }
    if jitter_start <= T::zero() {
        return Err(LdcError::InvalidParameter("jitter_start must be positive".into()));
    }
    let d = cov.rows();
    let cap = (T::lit(1e-2) * cov.trace() / T::from_usize_lossy(d.max(1))).max(jitter_start);
    let mut jitter = T::zero();
    loop {
        let mut shifted = cov.clone();
        for i in 0..d {
            shifted[(i, i)] += jitter;
        }
        if let Some(factor) = cholesky(&shifted) {
            return Ok(JitteredCholesky { factor, jitter });
        }
        jitter = if jitter == T::zero() {
            jitter_start
        } else {
            jitter * T::lit(10.0)
        };
        if jitter > cap * T::lit(1.000_001) {
            return Err(LdcError::NotPsd);
        }
    }
}

/// Draws `n` rows `mean + L·u`, `u ~ N(0, I)`, labelled `label`.
pub fn sample_gaussian<T: Real>(
    stats: &GaussianStats<T>,
    n: usize,
    label: usize,
    rng_seed: u64,
) -> Result<SampleSet<T>> {
    if n == 0 {
        return Err(LdcError::EmptyInput);
    }
    let d = stats.dim();
    let chol = cholesky_psd(&stats.cov, T::lit(DEFAULT_JITTER))?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut features = Matrix::zeros(n, d);
    let mut u = vec![T::zero(); d];
    for r in 0..n {
        for ui in u.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *ui = T::lit(z);
        }
        let row = features.row_mut(r);
        for i in 0..d {
            let mut s = stats.mean[i];
            for (k, &uk) in u.iter().enumerate().take(i + 1) {
                s += chol.factor[(i, k)] * uk;
            }
            row[i] = s;
        }
    }
    SampleSet::new(features, vec![label; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn m(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    /// Two-pass textbook covariance, written independently of the
    /// single-pass accumulation above.
    fn two_pass_cov(x: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = x.len() as f64;
        let d = x[0].len();
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let cov = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| x.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / n)
                    .collect()
            })
            .collect();
        (mean, cov)
    }

    #[test]
    fn mean_cov_symmetric_pair() {
        let s = estimate_mean_cov(&m(&[vec![1.0, 0.0], vec![-1.0, 0.0]])).unwrap();
        assert_eq!(s.mean, vec![0.0, 0.0]);
        assert_eq!(s.cov, m(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
    }

    #[test]
    fn mean_cov_single_sample_is_degenerate() {
        let s = estimate_mean_cov(&m(&[vec![3.0, -2.0, 0.5]])).unwrap();
        assert_eq!(s.mean, vec![3.0, -2.0, 0.5]);
        assert_eq!(s.cov, Matrix::zeros(3, 3));
    }

    #[test]
    fn mean_cov_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let s = estimate_mean_cov(&m(&rows)).unwrap();
        let (mean, cov) = two_pass_cov(&rows);
        for i in 0..3 {
            assert!((s.mean[i] - mean[i]).abs() < 1e-12);
            for j in 0..3 {
                assert!((s.cov[(i, j)] - cov[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_cov_errors() {
        assert!(matches!(
            estimate_mean_cov(&Matrix::<f64>::zeros(0, 3)),
            Err(LdcError::EmptyInput)
        ));
        assert!(matches!(
            estimate_mean_cov(&m(&[vec![1.0, f64::NAN]])),
            Err(LdcError::NonFinite)
        ));
    }

    fn class_with_cov(cov_diag: f64, d: usize) -> Matrix<f64> {
        // ±a e_i pairs have population covariance a² on the diagonal
        let a = cov_diag.sqrt();
        let mut rows = Vec::new();
        for i in 0..d {
            let mut p = vec![0.0; d];
            p[i] = a * (d as f64).sqrt();
            rows.push(p.clone());
            p[i] = -p[i];
            rows.push(p);
        }
        m(&rows)
    }

    #[test]
    fn shared_cov_fixed_point() {
        let d = 3;
        let c = estimate_mean_cov(&class_with_cov(2.0, d)).unwrap().cov;
        let prev = SharedCovariance { sigma: c.clone(), n_classes: 7 };
        let next = update_shared_cov(&prev, &[class_with_cov(2.0, d), class_with_cov(2.0, d)]).unwrap();
        assert!(next.sigma.max_abs_diff(&c) < 1e-14);
        assert_eq!(next.n_classes, 9);
    }

    #[test]
    fn shared_cov_weighted_average() {
        let d = 4;
        let prev = SharedCovariance { sigma: Matrix::identity(d), n_classes: 60 };
        let new: Vec<_> = (0..5).map(|_| class_with_cov(3.0, d)).collect();
        let next = update_shared_cov(&prev, &new).unwrap();
        let expected = 75.0 / 65.0;
        for i in 0..d {
            for j in 0..d {
                let e = if i == j { expected } else { 0.0 };
                assert!((next.sigma[(i, j)] - e).abs() < 1e-12);
            }
        }
        assert_eq!(next.n_classes, 65);
    }

    #[test]
    fn shared_cov_empty_prior() {
        let d = 2;
        let a = m(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.0, 0.5]]);
        let b = m(&[vec![0.0, 1.0], vec![2.0, 2.0]]);
        let next = update_shared_cov(&SharedCovariance::empty(d), &[a.clone(), b.clone()]).unwrap();
        let ca = estimate_mean_cov(&a).unwrap().cov;
        let cb = estimate_mean_cov(&b).unwrap().cov;
        let mean = ca.add(&cb).unwrap().scale(0.5);
        assert!(next.sigma.max_abs_diff(&mean) < 1e-15);
        assert_eq!(next.n_classes, 2);
    }

    #[test]
    fn shared_cov_errors() {
        let prev = SharedCovariance::<f64>::empty(3);
        assert!(matches!(update_shared_cov(&prev, &[]), Err(LdcError::EmptyInput)));
        assert!(matches!(
            update_shared_cov(&prev, &[Matrix::zeros(4, 2)]),
            Err(LdcError::DimensionMismatch { .. })
        ));
        // single-sample class is accepted with a zero covariance
        let one = update_shared_cov(&prev, &[m(&[vec![1.0, 2.0, 3.0]])]).unwrap();
        assert_eq!(one.sigma, Matrix::zeros(3, 3));
    }

    #[test]
    fn cholesky_psd_cases() {
        let id = cholesky_psd(&Matrix::<f64>::identity(4), 1e-6).unwrap();
        assert_eq!(id.jitter, 0.0);
        assert_eq!(id.factor, Matrix::identity(4));

        let a = m(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let c = cholesky_psd(&a, 1e-6).unwrap();
        assert_eq!(c.jitter, 0.0);
        assert!(c.factor.matmul_t(&c.factor).unwrap().max_abs_diff(&a) < 1e-12);
        assert!((c.factor[(1, 1)] - 2f64.sqrt()).abs() < 1e-12);

        let singular = m(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let c = cholesky_psd(&singular, 1e-6).unwrap();
        assert!(c.jitter > 0.0 && c.jitter <= 1e-6);
        assert!(c.factor.matmul_t(&c.factor).unwrap().max_abs_diff(&singular) < 2e-6);

        let indefinite = m(&[vec![1.0, 0.0], vec![0.0, -1.0]]);
        assert!(matches!(cholesky_psd(&indefinite, 1e-6), Err(LdcError::NotPsd)));
    }

    #[test]
    fn sampling_zero_covariance_collapses_to_mean() {
        let stats = GaussianStats::<f64>::new(vec![1.0, -1.0, 2.0], Matrix::zeros(3, 3)).unwrap();
        let s = sample_gaussian(&stats, 200, 4, 9).unwrap();
        assert!(s.labels.iter().all(|&l| l == 4));
        for row in s.features.row_iter() {
            for (x, mu) in row.iter().zip(&stats.mean) {
                assert!((x - mu).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn sampling_mean_within_standard_error() {
        let n = 100_000;
        let stats = GaussianStats::<f64>::new(vec![1.0, 2.0], Matrix::identity(2)).unwrap();
        let s = sample_gaussian(&stats, n, 0, 2024).unwrap();
        let est = estimate_mean_cov(&s.features).unwrap();
        let bound = 5.0 / (n as f64).sqrt();
        for i in 0..2 {
            assert!((est.mean[i] - stats.mean[i]).abs() < bound);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let stats = GaussianStats::new(vec![0.0; 3], Matrix::identity(3)).unwrap();
        let a = sample_gaussian(&stats, 50, 1, 77).unwrap();
        let b = sample_gaussian(&stats, 50, 1, 77).unwrap();
        let bits = |s: &SampleSet<f64>| s.features.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = sample_gaussian(&stats, 50, 1, 78).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }
}
