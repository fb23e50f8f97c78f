//! Central finite-difference checks of every hand-written backward pass
//! used in training.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::{cross_entropy, ClassifierState};
use crate::diffnet::{GradBundle, Net};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::linstats::{DivergenceKind, SampleSet, SharedCovariance};
use crate::pcu::{matching_loss, pcu_gradients, ClassStats, PcuState};
use crate::seeds::child_seed;

pub const STEP: f64 = 1e-5;
pub const COORDS: usize = 200;
pub const REQUIRED_FRACTION: f64 = 0.95;
/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so coordinates with vanishing gradient are compared absolutely.
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub passed: usize,
    pub tolerance: f64,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn fraction(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }

    pub fn ok(&self) -> bool {
        self.checked > 0 && self.fraction() >= REQUIRED_FRACTION
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<26} {:>3}/{:<3} within {:.0e} (max rel err {:.2e}) {}",
            self.name,
            self.passed,
            self.checked,
            self.tolerance,
            self.max_rel_err,
            if self.ok() { "ok" } else { "FAIL" }
        )
    }
}

/// Compares `analytic[i]` against `(eval(i, +h) − eval(i, −h)) / 2h` on up
/// to [`COORDS`] coordinates chosen by `seed`.
pub fn compare(
    name: &str,
    analytic: &[f64],
    tolerance: f64,
    seed: u64,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = analytic.len();
    let coords = sample(&mut rng, n, COORDS.min(n));
    let mut passed = 0;
    let mut max_rel_err: f64 = 0.0;
    for i in coords.iter() {
        let numeric = (eval(i, STEP)? - eval(i, -STEP)?) / (2.0 * STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        max_rel_err = max_rel_err.max(rel);
        if rel < tolerance {
            passed += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        checked: coords.len(),
        passed,
        tolerance,
        max_rel_err,
    })
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let a = random_matrix(d, d, rng);
    let mut s = a.matmul_t(&a).expect("square").scale(1.0 / d as f64);
    for i in 0..d {
        s[(i, i)] += 0.2;
    }
    s
}

fn jiggle(net: &mut Net<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    for i in 0..net.param_count() {
        *net.param_mut(i) += scale * rng.random_range(-1.0..1.0);
    }
}

/// A unit with every parameter nonzero, including the output layers.
fn random_pcu(d: usize, samples: usize, recur: usize, rng: &mut ChaCha8Rng) -> Result<PcuState> {
    let shared = SharedCovariance {
        sigma: random_spd(d, rng),
        n_classes: 4,
    };
    let mut pcu = PcuState::new(shared, samples, recur, rng.random())?;
    jiggle(&mut pcu.mapping_net, 0.02, rng);
    jiggle(&mut pcu.calib_net, 0.1, rng);
    Ok(pcu)
}

/// `∂‖M(w)‖²_F / ∂θ_m` for the mapped class covariance.
pub fn check_mapping_net(d: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pcu = random_pcu(d, 4, 1, &mut rng)?;
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |p: &PcuState| -> Result<f64> {
        let c = p.map_covariance(&w)?;
        Ok(c.as_slice().iter().map(|v| v * v).sum())
    };
    let (cache, traces) = pcu.trace_covariances(&[&w])?;
    let grad_cov = traces[0].cov.scale(2.0);
    let upstream = traces[0].backward(Some(&grad_cov), None);
    let upstream = Matrix::from_vec(1, d * d, upstream.into_vec())?;
    let (grads, _) = pcu.mapping_net.backward(&cache, &upstream)?;
    compare("mapping net", &grads.flat(), 1e-4, seed ^ 1, |i, h| {
        let mut p = pcu.clone();
        *p.mapping_net.param_mut(i) += h;
        loss(&p)
    })
}

/// `⟨G, f^R(X)⟩` for the residual calibration net unrolled `recur` times.
pub fn check_calibration_net(d: usize, recur: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pcu = random_pcu(d, 4, recur, &mut rng)?;
    let x = random_matrix(12, d, &mut rng);
    let g = random_matrix(12, d, &mut rng);
    let loss = |net: &Net<f64>| -> Result<f64> {
        let mut y = x.clone();
        for _ in 0..recur {
            y = net.predict(&y)?;
        }
        Ok(y.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum())
    };
    let net = &pcu.calib_net;
    let mut caches = Vec::new();
    let mut y = x.clone();
    for _ in 0..recur {
        let (out, cache) = net.forward(&y)?;
        caches.push(cache);
        y = out;
    }
    let mut upstream = g.clone();
    let mut total = GradBundle::zeros_like(net);
    for cache in caches.iter().rev() {
        let (gp, gx) = net.backward(cache, &upstream)?;
        total.accumulate(&gp)?;
        upstream = gx;
    }
    compare("calibration net", &total.flat(), 1e-4, seed ^ 2, |i, h| {
        let mut n = net.clone();
        *n.param_mut(i) += h;
        loss(&n)
    })
}

/// Cross-entropy of cosine logits with respect to the class vectors.
pub fn check_classifier(n_classes: usize, d: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = random_matrix(n_classes, d, &mut rng);
    let x = random_matrix(30, d, &mut rng);
    let labels: Vec<usize> = (0..30).map(|_| rng.random_range(0..n_classes)).collect();
    let scale = 4.0;
    let loss = |v: &Matrix<f64>| -> Result<f64> {
        let c = ClassifierState::new(v.clone(), scale)?;
        Ok(cross_entropy(&c.logits(&x)?, &labels)?.0)
    };
    let c = ClassifierState::new(vectors.clone(), scale)?;
    let (_, grad_logits) = cross_entropy(&c.logits(&x)?, &labels)?;
    let grad = c.logits_backward(&x, &grad_logits)?;
    compare("classifier", grad.as_slice(), 1e-4, seed ^ 3, |i, h| {
        let mut v = vectors.clone();
        v.as_mut_slice()[i] += h;
        loss(&v)
    })
}

/// Matching loss with respect to the calibrated feature rows.
pub fn check_matching_loss(kind: DivergenceKind, d: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 24;
    let labels: Vec<usize> = (0..3 * n).map(|i| i % 3).collect();
    let shift = |i: usize, j: usize| if j == i % 3 { 1.0 } else { 0.0 };
    let calibrated = Matrix::from_fn(3 * n, d, |i, j| shift(i, j) + rng.random_range(-1.0..1.0));
    let real = Matrix::from_fn(3 * n, d, |i, j| 1.2 * shift(i, j) + rng.random_range(-0.8..0.8));
    let real = SampleSet::new(real, labels.clone())?;
    let cal = SampleSet::new(calibrated.clone(), labels.clone())?;
    let m = matching_loss(&cal, &real, kind)?;
    let name = format!("matching loss ({kind})");
    compare(&name, m.grad.as_slice(), 1e-3, seed ^ 4, |i, h| {
        let mut f = calibrated.clone();
        f.as_mut_slice()[i] += h;
        Ok(matching_loss(&SampleSet::new(f, labels.clone())?, &real, kind)?.value)
    })
}

/// The full training pass: reparameterized draw, unrolled calibration and
/// matching loss, differentiated into the mapping net.
pub fn check_pcu_pipeline(d: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pcu = random_pcu(d, 16, 2, &mut rng)?;
    let vectors = Matrix::from_fn(3, d, |i, j| if i == j { 1.5 } else { 0.1 * (i + j) as f64 });
    let classifier = ClassifierState::new(vectors, 16.0)?;
    let real = Matrix::from_fn(60, d, |i, j| {
        (if j == i % 3 { 1.4 } else { 0.0 }) + rng.random_range(-1.0..1.0)
    });
    let real = ClassStats::fit(&SampleSet::new(real, (0..60).map(|i| i % 3).collect())?)?;
    let classes = [0, 1, 2];
    let draw_seed = rng.random();
    let kind = DivergenceKind::Kl;
    let g = pcu_gradients(&pcu, &classifier, &classes, &real, kind, draw_seed)?;
    compare("sampler pipeline", &g.mapping.flat(), 1e-3, seed ^ 5, |i, h| {
        let mut p = pcu.clone();
        *p.mapping_net.param_mut(i) += h;
        Ok(pcu_gradients(&p, &classifier, &classes, &real, kind, draw_seed)?.loss)
    })
}

/// Every check, at shapes matching the default pipeline where cheap.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = vec![
        check_mapping_net(6, child_seed(seed, 1, 0))?,
        check_calibration_net(16, 3, child_seed(seed, 2, 0))?,
        check_classifier(12, 16, child_seed(seed, 3, 0))?,
    ];
    for (k, kind) in DivergenceKind::ALL.into_iter().enumerate() {
        out.push(check_matching_loss(kind, 4, child_seed(seed, 4, k as u64))?);
    }
    out.push(check_pcu_pipeline(4, child_seed(seed, 5, 0))?);
    Ok(out)
}
