//! Cosine-similarity classifier whose rows double as class prototypes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LdcError, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::linstats::SampleSet;
use crate::scalar::Real;

pub const DEFAULT_SCALE: f64 = 16.0;

/// Class vectors (one row per seen class) and the cosine-logit scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierState<T> {
    vectors: Matrix<T>,
    scale: T,
}

/// Which rows receive updates during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TrainableRows {
    #[default]
    All,
    /// Only rows at index `>= first`.
    From(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions<T> {
    pub epochs: usize,
    pub lr: T,
    pub batch_size: usize,
    pub trainable: TrainableRows,
    pub seed: u64,
}

/// Row `i` is the mean of class `i`'s features.
pub fn init_prototypes<T: Real>(per_class_features: &[Matrix<T>]) -> Result<Matrix<T>> {
    let d = per_class_features.first().map_or(0, Matrix::cols);
    let mut out = Matrix::zeros(per_class_features.len(), d);
    for (i, feats) in per_class_features.iter().enumerate() {
        if feats.rows() == 0 {
            return Err(LdcError::EmptyClass(i));
        }
        if feats.cols() != d {
            return Err(LdcError::DimensionMismatch {
                expected: d,
                found: feats.cols(),
            });
        }
        let inv_n = T::one() / T::from_usize_lossy(feats.rows());
        let row = out.row_mut(i);
        for f in feats.row_iter() {
            for (r, &x) in row.iter_mut().zip(f) {
                *r += x;
            }
        }
        row.iter_mut().for_each(|r| *r *= inv_n);
    }
    Ok(out)
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(softmax − onehot) / n`.
pub fn cross_entropy<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(LdcError::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    if n == 0 {
        return Err(LdcError::EmptyInput);
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut grad = Matrix::zeros(n, k);
    let mut loss = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(LdcError::LabelOutOfRange { label, classes: k });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum_exp: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum_exp.ln();
        let lse = max + log_sum;
        loss += (max - row[label]) + log_sum;
        let g = grad.row_mut(i);
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *gj = (p - if j == label { T::one() } else { T::zero() }) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

impl<T: Real> ClassifierState<T> {
    pub fn new(vectors: Matrix<T>, scale: T) -> Result<Self> {
        if !(scale > T::zero()) {
            return Err(LdcError::InvalidParameter("scale must be positive".into()));
        }
        if !vectors.is_finite() {
            return Err(LdcError::NonFinite);
        }
        if vectors.row_iter().any(|r| norm(r) == T::zero()) {
            return Err(LdcError::ZeroVector);
        }
        Ok(Self { vectors, scale })
    }

    pub fn from_class_features(per_class_features: &[Matrix<T>], scale: T) -> Result<Self> {
        Self::new(init_prototypes(per_class_features)?, scale)
    }

    pub fn vectors(&self) -> &Matrix<T> {
        &self.vectors
    }

    pub fn vector(&self, class: usize) -> Option<&[T]> {
        (class < self.n_classes()).then(|| self.vectors.row(class))
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn n_classes(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// `scale · cos(x, w_i)` for every class.
    pub fn cosine_logits(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim() {
            return Err(LdcError::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let nx = norm(x);
        if nx == T::zero() {
            return Err(LdcError::ZeroVector);
        }
        Ok(self
            .vectors
            .row_iter()
            .map(|w| self.scale * dot(x, w) / (nx * norm(w)))
            .collect())
    }

    /// Logits for every row of `x` (n×N).
    pub fn logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = Matrix::zeros(x.rows(), self.n_classes());
        for (i, row) in x.row_iter().enumerate() {
            out.row_mut(i).copy_from_slice(&self.cosine_logits(row)?);
        }
        Ok(out)
    }

    pub fn predict(&self, x: &[T]) -> Result<usize> {
        let logits = self.cosine_logits(x)?;
        Ok(argmax(&logits))
    }

    pub fn predict_batch(&self, x: &Matrix<T>) -> Result<Vec<usize>> {
        x.row_iter().map(|r| self.predict(r)).collect()
    }

    /// Gradient of the loss with respect to the class vectors, given
    /// `∂L/∂logits` for the batch `x`.
    pub fn logits_backward(&self, x: &Matrix<T>, grad_logits: &Matrix<T>) -> Result<Matrix<T>> {
        if grad_logits.shape() != (x.rows(), self.n_classes()) {
            return Err(LdcError::DimensionMismatch {
                expected: self.n_classes(),
                found: grad_logits.cols(),
            });
        }
        let d = self.dim();
        let w_norms: Vec<T> = self.vectors.row_iter().map(norm).collect();
        let mut grad = Matrix::zeros(self.n_classes(), d);
        let mut xhat = vec![T::zero(); d];
        for (i, x_row) in x.row_iter().enumerate() {
            let nx = norm(x_row);
            if nx == T::zero() {
                return Err(LdcError::ZeroVector);
            }
            for (h, &v) in xhat.iter_mut().zip(x_row) {
                *h = v / nx;
            }
            for (j, &g) in grad_logits.row(i).iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let w = self.vectors.row(j);
                let nw = w_norms[j];
                let cos = dot(&xhat, w) / nw;
                let coef = g * self.scale / nw;
                let gr = grad.row_mut(j);
                for k in 0..d {
                    gr[k] += coef * (xhat[k] - cos * w[k] / nw);
                }
            }
        }
        Ok(grad)
    }

    /// Appends new class rows; existing rows are untouched.
    pub fn expand(&self, new_prototypes: &Matrix<T>) -> Result<Self> {
        if new_prototypes.rows() == 0 {
            return Ok(self.clone());
        }
        if new_prototypes.cols() != self.dim() {
            return Err(LdcError::DimensionMismatch {
                expected: self.dim(),
                found: new_prototypes.cols(),
            });
        }
        if new_prototypes.row_iter().any(|r| norm(r) == T::zero()) {
            return Err(LdcError::ZeroVector);
        }
        Ok(Self {
            vectors: self.vectors.vstack(new_prototypes)?,
            scale: self.scale,
        })
    }

    /// Percentage of rows whose argmax matches the label.
    pub fn accuracy(&self, data: &SampleSet<T>) -> Result<f64> {
        if data.is_empty() {
            return Err(LdcError::EmptyInput);
        }
        let preds = self.predict_batch(&data.features)?;
        let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
        Ok(100.0 * correct as f64 / data.len() as f64)
    }
}

pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Minibatch SGD on the cross-entropy of cosine logits. Rows outside
/// `opts.trainable` are never written. Returns the trained state and the
/// mean loss of every epoch.
pub fn train_classifier<T: Real>(
    c: &ClassifierState<T>,
    data: &SampleSet<T>,
    opts: &TrainOptions<T>,
) -> Result<(ClassifierState<T>, Vec<T>)> {
    if data.is_empty() {
        return Err(LdcError::EmptyInput);
    }
    if data.dim() != c.dim() {
        return Err(LdcError::DimensionMismatch {
            expected: c.dim(),
            found: data.dim(),
        });
    }
    if let Some(&label) = data.labels.iter().find(|&&l| l >= c.n_classes()) {
        return Err(LdcError::LabelOutOfRange {
            label,
            classes: c.n_classes(),
        });
    }
    if opts.lr < T::zero() {
        return Err(LdcError::InvalidParameter("negative learning rate".into()));
    }
    let mut state = c.clone();
    let mut trace = Vec::with_capacity(opts.epochs);
    if opts.lr == T::zero() || opts.epochs == 0 {
        return Ok((state, trace));
    }
    let first_trainable = match opts.trainable {
        TrainableRows::All => 0,
        TrainableRows::From(k) => k,
    };
    let batch = opts.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = T::zero();
        for chunk in order.chunks(batch) {
            let xb = data.features.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let logits = state.logits(&xb)?;
            let (loss, g_logits) = cross_entropy(&logits, &yb)?;
            epoch_loss += loss * T::from_usize_lossy(chunk.len());
            let g = state.logits_backward(&xb, &g_logits)?;
            for r in first_trainable..state.n_classes() {
                let gr = g.row(r);
                for (w, &gv) in state.vectors.row_mut(r).iter_mut().zip(gr) {
                    *w -= opts.lr * gv;
                }
            }
        }
        trace.push(epoch_loss / T::from_usize_lossy(data.len()));
    }
    if state.vectors.row_iter().any(|r| norm(r) == T::zero() || !r.iter().all(|v| v.is_finite())) {
        return Err(LdcError::NonFinite);
    }
    Ok((state, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn m(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn prototypes_are_class_means() {
        let one = init_prototypes(&[m(&[vec![1.0, 2.0]]), m(&[vec![-3.0, 0.5]])]).unwrap();
        assert_eq!(one, m(&[vec![1.0, 2.0], vec![-3.0, 0.5]]));
        let avg = init_prototypes(&[m(&[vec![2.0, 0.0], vec![0.0, 2.0]])]).unwrap();
        assert_eq!(avg, m(&[vec![1.0, 1.0]]));
        assert!(matches!(
            init_prototypes(&[m(&[vec![1.0]]), Matrix::zeros(0, 1)]),
            Err(LdcError::EmptyClass(1))
        ));
    }

    #[test]
    fn prototype_matches_brute_force_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..7).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let p = init_prototypes(&[m(&rows)]).unwrap();
        for j in 0..7 {
            let mut s = 0.0;
            for r in &rows {
                s += r[j];
            }
            assert!((p[(0, j)] - s / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_of_own_vector_and_orthogonal() {
        let c = ClassifierState::new(m(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, -1.0]]), 16.0).unwrap();
        let l = c.cosine_logits(&[1.0, 0.0]).unwrap();
        assert!((l[0] - 16.0).abs() < 1e-12);
        assert_eq!(l[1], 0.0);
        assert_eq!(argmax(&l), 0);
        assert!(matches!(c.cosine_logits(&[0.0, 0.0]), Err(LdcError::ZeroVector)));
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let (loss, grad) = cross_entropy(&Matrix::<f64>::zeros(3, 5), &[0, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        for r in grad.row_iter() {
            assert!(r.iter().sum::<f64>().abs() < 1e-12);
        }
        assert!(matches!(
            cross_entropy(&Matrix::<f64>::zeros(1, 5), &[5]),
            Err(LdcError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn large_margin_loss_is_tiny() {
        let mut logits = Matrix::<f64>::zeros(1, 5);
        logits[(0, 2)] = 20.0;
        let (loss, _) = cross_entropy(&logits, &[2]).unwrap();
        assert!(loss <= (1.0 + 4.0 * (-20f64).exp()).ln() + 1e-15);
        assert!(loss < 1e-7);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Matrix::from_fn(4, 6, |_, _| rng.random_range(-30.0..30.0));
        let labels = [0, 5, 3, 3];
        let (loss, _) = cross_entropy(&logits, &labels).unwrap();
        let mut expected = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let r = logits.row(i);
            let mx = r.iter().cloned().fold(f64::MIN, f64::max);
            let lse = mx + r.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
            expected += lse - r[y];
        }
        assert!((loss - expected / 4.0).abs() < 1e-10);
    }

    #[test]
    fn expand_appends_without_touching_old_rows() {
        let base = Matrix::from_fn(60, 4, |i, j| 1.0 + (i * 4 + j) as f64 * 0.01);
        let c = ClassifierState::new(base.clone(), 16.0).unwrap();
        let e = c.expand(&Matrix::from_fn(5, 4, |i, j| (i + j + 1) as f64)).unwrap();
        assert_eq!(e.n_classes(), 65);
        let old_bits: Vec<u64> = base.as_slice().iter().map(|v| v.to_bits()).collect();
        let new_bits: Vec<u64> = e.vectors().as_slice()[..240].iter().map(|v| v.to_bits()).collect();
        assert_eq!(old_bits, new_bits);
        assert_eq!(c.expand(&Matrix::zeros(0, 4)).unwrap(), c);
        assert!(c.expand(&Matrix::from_fn(1, 3, |_, _| 1.0)).is_err());
    }

    fn separable_two_class(seed: u64) -> SampleSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..100 {
            let label = i % 2;
            let angle: f64 = if label == 0 { rng.random_range(0.1..1.2) } else { rng.random_range(1.9..3.0) };
            let r: f64 = rng.random_range(0.5..2.0);
            rows.push(vec![r * angle.cos(), r * angle.sin()]);
            labels.push(label);
        }
        SampleSet::new(m(&rows), labels).unwrap()
    }

    #[test]
    fn training_separates_linearly_separable_classes() {
        let data = separable_two_class(1);
        // deliberately poor start
        let c = ClassifierState::new(m(&[vec![0.0, 1.0], vec![0.1, 1.0]]), 16.0).unwrap();
        let opts = TrainOptions { epochs: 100, lr: 0.1, batch_size: 16, trainable: TrainableRows::All, seed: 3 };
        let (trained, trace) = train_classifier(&c, &data, &opts).unwrap();
        assert_eq!(trace.len(), 100);
        assert!(trained.accuracy(&data).unwrap() >= 99.0);
    }

    #[test]
    fn zero_learning_rate_and_masking() {
        let data = separable_two_class(2);
        let c = ClassifierState::new(m(&[vec![0.0, 1.0], vec![0.1, 1.0]]), 16.0).unwrap();
        let mut opts = TrainOptions { epochs: 10, lr: 0.0, batch_size: 16, trainable: TrainableRows::All, seed: 3 };
        assert_eq!(train_classifier(&c, &data, &opts).unwrap().0, c);
        opts.lr = 0.1;
        opts.trainable = TrainableRows::From(1);
        let (t, _) = train_classifier(&c, &data, &opts).unwrap();
        assert_eq!(t.vectors().row(0), c.vectors().row(0));
        assert_ne!(t.vectors().row(1), c.vectors().row(1));
    }

    #[test]
    fn prototypes_classify_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let protos = Matrix::from_fn(10, 6, |_, _| rng.random_range(-1.0..1.0));
        let c = ClassifierState::new(protos.clone(), 16.0).unwrap();
        let data = SampleSet::new(protos, (0..10).collect()).unwrap();
        assert_eq!(c.accuracy(&data).unwrap(), 100.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn argmax_is_scale_invariant(seed in any::<u64>(), lambda in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = ClassifierState::new(Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0)), 16.0).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scaled: Vec<f64> = x.iter().map(|v| v * lambda).collect();
            prop_assert_eq!(c.predict(&x).unwrap(), c.predict(&scaled).unwrap());
        }
    }
}
