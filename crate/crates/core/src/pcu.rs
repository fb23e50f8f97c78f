//! The parameterized calibration unit: a Gaussian sampler whose per-class
//! covariance comes from a learned mapping of (class vector, shared
//! covariance), followed by a residual calibration network applied
//! recurrently to the drawn features.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::classifier::ClassifierState;
use crate::codec::{ByteReader, ByteWriter};
use crate::diffnet::{init_net, ForwardCache, GradBundle, InitScheme, Net};
use crate::error::{LdcError, Result};
use crate::linalg::{sym_eigen, Matrix, SymEigen};
use crate::linstats::{
    divergence_grad, estimate_mean_cov, gaussian_divergence, DivergenceKind, GaussianStats,
    SampleSet, SharedCovariance,
};
use crate::seeds::child_seed;

/// Eigenvalue floor applied to every mapped covariance.
pub const PSD_FLOOR: f64 = 1e-6;
pub const DEFAULT_RECUR_ITERS: usize = 3;
pub const DEFAULT_SAMPLES_PER_CLASS: usize = 64;

const PCU_MAGIC: &[u8; 4] = b"LDCP";
const PCU_VERSION: u32 = 1;

const SCOPE_DRAW: u64 = 0x5A4D;
const SCOPE_EPOCH: u64 = 0xE90C;

#[derive(Clone, Debug, PartialEq)]
pub struct PcuState {
    /// Maps `[vec(w wᵀ), vec(Σ)]` to a symmetric correction of `Σ`.
    pub mapping_net: Net<f64>,
    /// Residual `d → d` network applied `recur_iters` times.
    pub calib_net: Net<f64>,
    pub shared: SharedCovariance<f64>,
    pub samples_per_class: usize,
    pub recur_iters: usize,
}

/// Forward record of one `map_covariance` call.
#[derive(Clone, Debug)]
pub struct CovarianceTrace {
    pub cov: Matrix<f64>,
    /// Symmetric square root of `cov`, used as the sampling factor.
    pub factor: Matrix<f64>,
    eigen: SymEigen<f64>,
}

fn clamp(l: f64) -> f64 {
    l.max(PSD_FLOOR)
}

fn clamp_deriv(l: f64) -> f64 {
    if l > PSD_FLOOR {
        1.0
    } else {
        0.0
    }
}

fn sqrt_clamp(l: f64) -> f64 {
    clamp(l).sqrt()
}

fn sqrt_clamp_deriv(l: f64) -> f64 {
    if l > PSD_FLOOR {
        0.5 / l.sqrt()
    } else {
        0.0
    }
}

impl CovarianceTrace {
    /// Gradient with respect to the mapping network's output, given
    /// gradients with respect to the covariance and/or the sampling factor.
    pub fn backward(
        &self,
        grad_cov: Option<&Matrix<f64>>,
        grad_factor: Option<&Matrix<f64>>,
    ) -> Matrix<f64> {
        let d = self.cov.rows();
        let mut g = Matrix::zeros(d, d);
        if let Some(gc) = grad_cov {
            g.axpy(1.0, &self.eigen.backward(clamp, clamp_deriv, gc))
                .expect("d×d");
        }
        if let Some(gf) = grad_factor {
            g.axpy(1.0, &self.eigen.backward(sqrt_clamp, sqrt_clamp_deriv, gf))
                .expect("d×d");
        }
        // S = (A + Aᵀ)/2 + Σ, and g is symmetric, so ∂L/∂A = g
        g
    }
}

impl PcuState {
    /// Fresh unit for `dim`-dimensional features. Hidden layers are He
    /// initialized; both output layers start at zero, so an untrained unit
    /// samples from `N(w, Σ)` and calibrates with the identity.
    pub fn new(
        shared: SharedCovariance<f64>,
        samples_per_class: usize,
        recur_iters: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = shared.dim();
        if d == 0 {
            return Err(LdcError::BadSpec("feature dimension must be positive".into()));
        }
        if samples_per_class == 0 {
            return Err(LdcError::InvalidParameter("samples_per_class must be positive".into()));
        }
        let mapping_net = zero_output(init_net(
            &[2 * d * d, 4 * d, d * d],
            InitScheme::He,
            false,
            child_seed(seed, 0x3A9, 0),
        )?);
        let calib_net = zero_output(init_net(
            &[d, 4 * d, d],
            InitScheme::He,
            true,
            child_seed(seed, 0x3A9, 1),
        )?);
        Ok(Self {
            mapping_net,
            calib_net,
            shared,
            samples_per_class,
            recur_iters,
        })
    }

    pub fn dim(&self) -> usize {
        self.shared.dim()
    }

    fn mapping_input(&self, w: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut input = Vec::with_capacity(2 * d * d);
        for &a in w {
            for &b in w {
                input.push(a * b);
            }
        }
        input.extend_from_slice(self.shared.sigma.as_slice());
        input
    }

    fn check_vector(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(LdcError::DimensionMismatch {
                expected: self.dim(),
                found: w.len(),
            });
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(LdcError::NonFinite);
        }
        Ok(())
    }

    fn trace_from_output(&self, out: &[f64]) -> Result<CovarianceTrace> {
        let d = self.dim();
        let a = Matrix::from_vec(d, d, out.to_vec())?;
        let s = a.symmetrize().add(&self.shared.sigma)?;
        let eigen = sym_eigen(&s)?;
        Ok(CovarianceTrace {
            cov: eigen.apply(clamp),
            factor: eigen.apply(sqrt_clamp),
            eigen,
        })
    }

    /// Class covariance `clamp(Σ + sym(M(w, Σ)))`, symmetric with every
    /// eigenvalue at least [`PSD_FLOOR`].
    pub fn map_covariance(&self, w: &[f64]) -> Result<Matrix<f64>> {
        Ok(self.trace_covariances(&[w])?.1.remove(0).cov)
    }

    /// Batched mapping with the network cache kept for backpropagation.
    pub fn trace_covariances(
        &self,
        ws: &[&[f64]],
    ) -> Result<(ForwardCache<f64>, Vec<CovarianceTrace>)> {
        let d = self.dim();
        let mut input = Vec::with_capacity(ws.len() * 2 * d * d);
        for w in ws {
            self.check_vector(w)?;
            input.extend(self.mapping_input(w));
        }
        let input = Matrix::from_vec(ws.len(), 2 * d * d, input)?;
        let (out, cache) = self.mapping_net.forward(&input)?;
        let traces = out
            .row_iter()
            .map(|row| self.trace_from_output(row))
            .collect::<Result<Vec<_>>>()?;
        Ok((cache, traces))
    }

    /// Draws `samples_per_class` features from `N(w_i, Σ_i)` for every
    /// requested class, labelled with the class id.
    pub fn sample_biased(
        &self,
        classifier: &ClassifierState<f64>,
        class_ids: &[usize],
        seed: u64,
    ) -> Result<SampleSet<f64>> {
        Ok(self.draw(classifier, class_ids, seed)?.samples)
    }

    fn draw(
        &self,
        classifier: &ClassifierState<f64>,
        class_ids: &[usize],
        seed: u64,
    ) -> Result<Draw> {
        let d = self.dim();
        if classifier.dim() != d {
            return Err(LdcError::DimensionMismatch {
                expected: d,
                found: classifier.dim(),
            });
        }
        let ws = class_ids
            .iter()
            .map(|&c| classifier.vector(c).ok_or(LdcError::UnknownClass(c)))
            .collect::<Result<Vec<_>>>()?;
        self.draw_at(&ws, class_ids, seed)
    }

    /// Reparameterized draw of `samples_per_class` rows around each mean,
    /// labelled by the matching entry of `labels`.
    fn draw_at(&self, means: &[&[f64]], labels: &[usize], seed: u64) -> Result<Draw> {
        let d = self.dim();
        let (cache, traces) = self.trace_covariances(means)?;
        let n = self.samples_per_class;
        let mut features = Matrix::zeros(n * labels.len(), d);
        let mut row_labels = Vec::with_capacity(n * labels.len());
        let mut noise = Vec::with_capacity(labels.len());
        for (k, (&class, trace)) in labels.iter().zip(&traces).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, SCOPE_DRAW, class as u64));
            let u = Matrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
            // rows w + B u with B symmetric: U B
            let xs = u.matmul(&trace.factor)?;
            for r in 0..n {
                let row = features.row_mut(k * n + r);
                for ((x, &v), &m) in row.iter_mut().zip(xs.row(r)).zip(means[k]) {
                    *x = m + v;
                }
                row_labels.push(class);
            }
            noise.push(u);
        }
        Ok(Draw {
            samples: SampleSet::new(features, row_labels)?,
            noise,
            cache,
            traces,
        })
    }

    /// Applies the calibration network `recur_iters` times, feeding each
    /// output back as the next input. Labels are carried through.
    pub fn calibrate(&self, biased: &SampleSet<f64>) -> Result<SampleSet<f64>> {
        self.calibrate_iters(biased, self.recur_iters)
    }

    pub fn calibrate_iters(&self, biased: &SampleSet<f64>, iters: usize) -> Result<SampleSet<f64>> {
        if biased.dim() != self.dim() {
            return Err(LdcError::DimensionMismatch {
                expected: self.dim(),
                found: biased.dim(),
            });
        }
        let mut x = biased.features.clone();
        for _ in 0..iters {
            x = self.calib_net.predict(&x)?;
        }
        SampleSet::new(x, biased.labels.clone())
    }

    /// Serializes as `LDCP`: version, d, samples_per_class, R, the two
    /// length-prefixed `LDCN` blobs, `Σ` row-major and `N`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.magic(PCU_MAGIC);
        w.u32(PCU_VERSION);
        w.u32(self.dim() as u32);
        w.u32(self.samples_per_class as u32);
        w.u32(self.recur_iters as u32);
        for net in [&self.mapping_net, &self.calib_net] {
            let blob = net.to_bytes();
            w.u32(blob.len() as u32);
            w.buf.extend_from_slice(&blob);
        }
        w.f64s(self.shared.sigma.as_slice().iter().copied());
        w.u64(self.shared.n_classes as u64);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(PCU_MAGIC, "LDCP")?;
        let version = r.u32()?;
        if version != PCU_VERSION {
            return Err(LdcError::BadVersion(version));
        }
        let d = r.u32()? as usize;
        let samples_per_class = r.u32()? as usize;
        let recur_iters = r.u32()? as usize;
        let mut nets = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = r.u32()? as usize;
            let start = r.position();
            if len > r.remaining() {
                return Err(LdcError::TruncatedFile);
            }
            nets.push(Net::from_bytes(&bytes[start..start + len])?);
            r.skip(len)?;
        }
        let sigma = Matrix::from_vec(d, d, r.f64s(d * d)?)?;
        let n_classes = r.u64()? as usize;
        let calib_net = nets.pop().expect("two nets");
        let mapping_net = nets.pop().expect("two nets");
        if mapping_net.input_dim() != 2 * d * d
            || mapping_net.output_dim() != d * d
            || calib_net.input_dim() != d
            || !calib_net.residual()
        {
            return Err(LdcError::BadSpec("network shapes do not match d".into()));
        }
        Ok(Self {
            mapping_net,
            calib_net,
            shared: SharedCovariance { sigma, n_classes },
            samples_per_class,
            recur_iters,
        })
    }

    /// Size of the serialized state; depends on `d` only.
    pub fn stored_bytes(&self) -> usize {
        self.to_bytes().len()
    }
}

fn zero_output(net: Net<f64>) -> Net<f64> {
    let mut layers = net.layers().to_vec();
    let last = layers.last_mut().expect("nonempty");
    last.weights = Matrix::zeros(last.weights.rows(), last.weights.cols());
    last.bias.iter_mut().for_each(|b| *b = 0.0);
    Net::new(layers, net.residual()).expect("same shapes")
}

struct Draw {
    samples: SampleSet<f64>,
    noise: Vec<Matrix<f64>>,
    cache: ForwardCache<f64>,
    traces: Vec<CovarianceTrace>,
}

/// Per-class Gaussian fits of a reference ("real") feature set.
#[derive(Clone, Debug)]
pub struct ClassStats {
    pub stats: BTreeMap<usize, GaussianStats<f64>>,
}

impl ClassStats {
    pub fn fit(data: &SampleSet<f64>) -> Result<Self> {
        let mut stats = BTreeMap::new();
        for c in data.classes() {
            stats.insert(c, estimate_mean_cov(&data.class_rows(c))?);
        }
        Ok(Self { stats })
    }
}

#[derive(Clone, Debug)]
pub struct MatchingLoss {
    /// Mean per-class divergence.
    pub value: f64,
    /// `∂value/∂row` for every calibrated row.
    pub grad: Matrix<f64>,
    pub per_class: Vec<(usize, f64)>,
}

/// Mean over classes of `D(fit(calibrated_c) ‖ fit(real_c))`, with gradients
/// flowing to the calibrated rows through the population mean and
/// covariance estimators.
pub fn matching_loss(
    calibrated: &SampleSet<f64>,
    real: &SampleSet<f64>,
    kind: DivergenceKind,
) -> Result<MatchingLoss> {
    if real.is_empty() {
        return Err(LdcError::EmptyInput);
    }
    matching_loss_against(calibrated, &ClassStats::fit(real)?, kind)
}

pub fn matching_loss_against(
    calibrated: &SampleSet<f64>,
    real: &ClassStats,
    kind: DivergenceKind,
) -> Result<MatchingLoss> {
    if calibrated.is_empty() {
        return Err(LdcError::EmptyInput);
    }
    let classes = calibrated.classes();
    if classes.len() != real.stats.len() || classes.iter().any(|c| !real.stats.contains_key(c)) {
        return Err(LdcError::ClassMismatch);
    }
    let d = calibrated.dim();
    let inv_classes = 1.0 / classes.len() as f64;
    let mut grad = Matrix::zeros(calibrated.len(), d);
    let mut value = 0.0;
    let mut per_class = Vec::with_capacity(classes.len());
    for &c in &classes {
        let idx = calibrated.indices_of(c);
        let rows = calibrated.features.select_rows(&idx);
        let fit = estimate_mean_cov(&rows)?;
        let target = &real.stats[&c];
        if target.dim() != d {
            return Err(LdcError::DimensionMismatch {
                expected: d,
                found: target.dim(),
            });
        }
        let dg = divergence_grad(kind, &fit, target)?;
        value += dg.value * inv_classes;
        per_class.push((c, dg.value));
        let n = idx.len() as f64;
        let gmu: Vec<f64> = dg.grad_mean.iter().map(|g| g / n).collect();
        let gcov = dg.grad_cov.scale(2.0 / n);
        let mut centered = vec![0.0; d];
        for (&i, row) in idx.iter().zip(rows.row_iter()) {
            for ((z, &x), &m) in centered.iter_mut().zip(row).zip(&fit.mean) {
                *z = x - m;
            }
            let gc = gcov.mul_vec(&centered)?;
            let out = grad.row_mut(i);
            for k in 0..d {
                out[k] = (gmu[k] + gc[k]) * inv_classes;
            }
        }
    }
    Ok(MatchingLoss {
        value,
        grad,
        per_class,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct PcuTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub divergence: DivergenceKind,
    /// Weight of the matching loss; zero leaves both networks untouched.
    pub matching_weight: f64,
    /// Global gradient-norm cap applied before each step; `None` disables it.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PcuTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 400,
            lr: 0.005,
            divergence: DivergenceKind::Kl,
            matching_weight: 1.0,
            clip_norm: Some(10.0),
            seed: 0,
        }
    }
}

/// Loss and parameter gradients of one sampling + calibration pass.
pub struct PcuGradients {
    pub loss: f64,
    pub mapping: GradBundle<f64>,
    pub calib: GradBundle<f64>,
}

/// One differentiable pass: reparameterized draw for `class_ids`, `R`
/// unrolled calibration steps, matching loss against `real`, and the
/// backward pass into both networks.
pub fn pcu_gradients(
    pcu: &PcuState,
    classifier: &ClassifierState<f64>,
    class_ids: &[usize],
    real: &ClassStats,
    kind: DivergenceKind,
    seed: u64,
) -> Result<PcuGradients> {
    let draw = pcu.draw(classifier, class_ids, seed)?;
    gradients_from_draw(pcu, draw, real, kind)
}

fn gradients_from_draw(
    pcu: &PcuState,
    draw: Draw,
    real: &ClassStats,
    kind: DivergenceKind,
) -> Result<PcuGradients> {
    let mut x = draw.samples.features.clone();
    let mut caches = Vec::with_capacity(pcu.recur_iters);
    for _ in 0..pcu.recur_iters {
        let (y, cache) = pcu.calib_net.forward(&x)?;
        caches.push(cache);
        x = y;
    }
    let calibrated = SampleSet::new(x, draw.samples.labels.clone())?;
    let m = matching_loss_against(&calibrated, real, kind)?;
    let mut g = m.grad;
    let mut calib = GradBundle::zeros_like(&pcu.calib_net);
    for cache in caches.iter().rev() {
        let (gp, gx) = pcu.calib_net.backward(cache, &g)?;
        calib.accumulate(&gp)?;
        g = gx;
    }
    let d = pcu.dim();
    let n = pcu.samples_per_class;
    let mut upstream = Matrix::zeros(draw.noise.len(), d * d);
    for (k, (u, trace)) in draw.noise.iter().zip(&draw.traces).enumerate() {
        let rows: Vec<usize> = (k * n..(k + 1) * n).collect();
        let gk = g.select_rows(&rows);
        // x_j = w + B u_j  ⇒  ∂L/∂B = Σ_j g_j u_jᵀ
        let grad_factor = gk.t_matmul(u)?;
        let ga = trace.backward(None, Some(&grad_factor));
        upstream.row_mut(k).copy_from_slice(ga.as_slice());
    }
    let (mapping, _) = pcu.mapping_net.backward(&draw.cache, &upstream)?;
    Ok(PcuGradients {
        loss: m.value,
        mapping,
        calib,
    })
}

/// Trains the mapping and calibration networks on the base classes present
/// in `base_data`, whose rows are the real features. Returns the trained
/// unit and the loss of every epoch.
pub fn train_pcu_base(
    pcu: &PcuState,
    classifier: &ClassifierState<f64>,
    base_data: &SampleSet<f64>,
    opts: &PcuTrainOptions,
) -> Result<(PcuState, Vec<f64>)> {
    let mut state = pcu.clone();
    let mut trace = Vec::with_capacity(opts.epochs);
    if opts.epochs == 0 {
        return Ok((state, trace));
    }
    if !(opts.lr > 0.0) {
        return Err(LdcError::InvalidParameter("learning rate must be positive".into()));
    }
    let real = ClassStats::fit(base_data)?;
    let classes: Vec<usize> = real.stats.keys().copied().collect();
    for epoch in 0..opts.epochs {
        let seed = child_seed(opts.seed, SCOPE_EPOCH, epoch as u64);
        let mut g = pcu_gradients(&state, classifier, &classes, &real, opts.divergence, seed)?;
        trace.push(g.loss);
        g.mapping.scale(opts.matching_weight);
        g.calib.scale(opts.matching_weight);
        if let Some(cap) = opts.clip_norm {
            let total = (g.mapping.norm().powi(2) + g.calib.norm().powi(2)).sqrt();
            if total > cap {
                g.mapping.scale(cap / total);
                g.calib.scale(cap / total);
            }
        }
        state.mapping_net.sgd_step(&g.mapping, opts.lr)?;
        state.calib_net.sgd_step(&g.calib, opts.lr)?;
        if !g.loss.is_finite() {
            return Err(LdcError::NonFinite);
        }
    }
    Ok((state, trace))
}

/// Per-class divergence of the sampler output before and after calibration.
#[derive(Clone, Debug)]
pub struct CalibrationReport {
    pub classes: Vec<usize>,
    /// `D(fit(biased) ‖ fit(real))`, i.e. zero calibration steps.
    pub biased: Vec<f64>,
    /// `D(fit(calibrated) ‖ fit(real))` after `recur_iters` steps.
    pub calibrated: Vec<f64>,
}

impl CalibrationReport {
    pub fn mean_biased(&self) -> f64 {
        mean(&self.biased)
    }

    pub fn mean_calibrated(&self) -> f64 {
        mean(&self.calibrated)
    }

    /// Fraction of classes the calibration moved closer to the real fit.
    pub fn improved_fraction(&self) -> f64 {
        let better = self
            .biased
            .iter()
            .zip(&self.calibrated)
            .filter(|(b, c)| c < b)
            .count();
        better as f64 / self.classes.len().max(1) as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Compares biased and calibrated draws of every class in `real` against the
/// real per-class fits.
pub fn calibration_report(
    pcu: &PcuState,
    classifier: &ClassifierState<f64>,
    real: &SampleSet<f64>,
    kind: DivergenceKind,
    seed: u64,
) -> Result<CalibrationReport> {
    let fits = ClassStats::fit(real)?;
    let classes: Vec<usize> = fits.stats.keys().copied().collect();
    let biased = pcu.sample_biased(classifier, &classes, seed)?;
    let calibrated = pcu.calibrate(&biased)?;
    let mut report = CalibrationReport {
        classes: classes.clone(),
        biased: Vec::with_capacity(classes.len()),
        calibrated: Vec::with_capacity(classes.len()),
    };
    for &c in &classes {
        let target = &fits.stats[&c];
        let b = estimate_mean_cov(&biased.class_rows(c))?;
        let k = estimate_mean_cov(&calibrated.class_rows(c))?;
        report.biased.push(gaussian_divergence(kind, &b, target)?);
        report.calibrated.push(gaussian_divergence(kind, &k, target)?);
    }
    Ok(report)
}
