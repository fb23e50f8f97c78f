//! Closed-form divergences between Gaussians and their gradients with
//! respect to the first argument's mean and covariance.

use std::fmt;
use std::str::FromStr;

use super::{cholesky_psd, GaussianStats, DEFAULT_JITTER};
use crate::error::{LdcError, Result};
use crate::linalg::{cholesky_inverse, cholesky_logdet, dot, sym_eigen, Matrix};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum DivergenceKind {
    /// `KL(p ‖ q)`
    #[default]
    Kl,
    /// Jensen-Shannon against the moment-matched midpoint Gaussian. There is
    /// no closed form for the mixture midpoint; this is an approximation.
    Js,
    /// Squared Hellinger distance, in `[0, 1]`.
    Hellinger,
    /// 2-Wasserstein (Bures) distance.
    W2,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 4] = [Self::Kl, Self::Js, Self::Hellinger, Self::W2];

    pub fn name(self) -> &'static str {
        match self {
            Self::Kl => "kl",
            Self::Js => "js",
            Self::Hellinger => "hellinger",
            Self::W2 => "w2",
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DivergenceKind {
    type Err = LdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(Self::Kl),
            "js" => Ok(Self::Js),
            "hellinger" => Ok(Self::Hellinger),
            "w2" | "emd" | "wasserstein" => Ok(Self::W2),
            other => Err(LdcError::InvalidParameter(format!("unknown divergence {other:?}"))),
        }
    }
}

/// Divergence value and its gradient with respect to `p`.
#[derive(Clone, Debug)]
pub struct DivergenceGrad<T> {
    pub value: T,
    pub grad_mean: Vec<T>,
    /// Symmetric.
    pub grad_cov: Matrix<T>,
}

struct Factor<T> {
    inv: Matrix<T>,
    logdet: T,
}

fn factor<T: Real>(cov: &Matrix<T>) -> Result<Factor<T>> {
    let chol = cholesky_psd(cov, T::lit(DEFAULT_JITTER))?;
    Ok(Factor {
        inv: cholesky_inverse(&chol.factor),
        logdet: cholesky_logdet(&chol.factor),
    })
}

fn check_dims<T: Real>(p: &GaussianStats<T>, q: &GaussianStats<T>) -> Result<()> {
    for s in [p, q] {
        if s.cov.rows() != s.dim() || s.cov.cols() != s.dim() {
            return Err(LdcError::DimensionMismatch {
                expected: s.dim(),
                found: s.cov.rows(),
            });
        }
    }
    if p.dim() != q.dim() {
        return Err(LdcError::DimensionMismatch {
            expected: p.dim(),
            found: q.dim(),
        });
    }
    Ok(())
}

/// `Σ_ij a_ij b_ij`, i.e. `tr(A B)` for symmetric operands.
fn frob_dot<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> T {
    dot(a.as_slice(), b.as_slice())
}

fn quad<T: Real>(m: &Matrix<T>, v: &[T]) -> T {
    dot(v, &m.mul_vec(v).expect("square"))
}

fn sub<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

fn kl_value<T: Real>(
    p: &GaussianStats<T>,
    q: &GaussianStats<T>,
    fp: &Factor<T>,
    fq: &Factor<T>,
) -> T {
    let d = T::from_usize_lossy(p.dim());
    let delta = sub(&q.mean, &p.mean);
    T::lit(0.5) * (frob_dot(&fq.inv, &p.cov) + quad(&fq.inv, &delta) - d + fq.logdet - fp.logdet)
}

fn midpoint<T: Real>(p: &GaussianStats<T>, q: &GaussianStats<T>) -> GaussianStats<T> {
    let half = T::lit(0.5);
    let mean: Vec<T> = p.mean.iter().zip(&q.mean).map(|(&a, &b)| (a + b) * half).collect();
    let delta = sub(&p.mean, &q.mean);
    let mut cov = p.cov.add(&q.cov).expect("same shape").scale(half);
    cov.axpy(T::lit(0.25), &Matrix::outer(&delta, &delta))
        .expect("same shape");
    GaussianStats { mean, cov }
}

struct Bures<T> {
    value: T,
    sqrt_q: Matrix<T>,
    inner: crate::linalg::SymEigen<T>,
}

fn bures<T: Real>(p: &GaussianStats<T>, q: &GaussianStats<T>) -> Result<Bures<T>> {
    let sqrt_q = sym_eigen(&q.cov)?.apply(|l| l.max(T::zero()).sqrt());
    let c = sqrt_q.matmul(&p.cov)?.matmul(&sqrt_q)?.symmetrize();
    let inner = sym_eigen(&c)?;
    let tr_sqrt: T = inner.values.iter().map(|&l| l.max(T::zero()).sqrt()).sum();
    let traces = p.cov.trace() + q.cov.trace();
    let mut value = traces - T::lit(2.0) * tr_sqrt;
    // below the resolution of the eigensolver the difference is rounding
    if value < T::lit(1e3) * T::epsilon() * traces.abs().max(T::min_positive_value()) {
        value = T::zero();
    }
    Ok(Bures { value, sqrt_q, inner })
}

/// Closed-form divergence between two Gaussians.
pub fn gaussian_divergence<T: Real>(
    kind: DivergenceKind,
    p: &GaussianStats<T>,
    q: &GaussianStats<T>,
) -> Result<T> {
    Ok(divergence_impl(kind, p, q, false)?.value)
}

/// Divergence and its gradient with respect to `p.mean` and `p.cov`.
pub fn divergence_grad<T: Real>(
    kind: DivergenceKind,
    p: &GaussianStats<T>,
    q: &GaussianStats<T>,
) -> Result<DivergenceGrad<T>> {
    divergence_impl(kind, p, q, true)
}

fn divergence_impl<T: Real>(
    kind: DivergenceKind,
    p: &GaussianStats<T>,
    q: &GaussianStats<T>,
    want_grad: bool,
) -> Result<DivergenceGrad<T>> {
    check_dims(p, q)?;
    let d = p.dim();
    let fp = factor(&p.cov)?;
    let fq = factor(&q.cov)?;
    let half = T::lit(0.5);
    let quarter = T::lit(0.25);
    let mut out = DivergenceGrad {
        value: T::zero(),
        grad_mean: vec![T::zero(); d],
        grad_cov: Matrix::zeros(d, d),
    };
    match kind {
        DivergenceKind::Kl => {
            out.value = kl_value(p, q, &fp, &fq);
            if want_grad {
                out.grad_mean = fq.inv.mul_vec(&sub(&p.mean, &q.mean))?;
                out.grad_cov = fq.inv.sub(&fp.inv)?.scale(half);
            }
        }
        DivergenceKind::Js => {
            let m = midpoint(p, q);
            let fm = factor(&m.cov)?;
            out.value = half * (kl_value(p, &m, &fp, &fm) + kl_value(q, &m, &fq, &fm));
            if want_grad {
                let a = &fm.inv;
                // derivative of ½KL(p‖m) + ½KL(q‖m) with respect to m
                let mut g_mu_m = vec![T::zero(); d];
                let mut g_cov_m = Matrix::zeros(d, d);
                for s in [p, q] {
                    let to_m = sub(&m.mean, &s.mean);
                    for (g, v) in g_mu_m.iter_mut().zip(a.mul_vec(&to_m)?) {
                        *g += half * v;
                    }
                    let mut second = s.cov.clone();
                    second.axpy(T::one(), &Matrix::outer(&to_m, &to_m))?;
                    let sandwich = a.matmul(&second)?.matmul(a)?;
                    g_cov_m.axpy(quarter, &a.sub(&sandwich)?)?;
                }
                let delta = sub(&p.mean, &q.mean);
                let direct_mu = a.mul_vec(&sub(&p.mean, &m.mean))?;
                let through_outer = g_cov_m.mul_vec(&delta)?;
                out.grad_mean = (0..d)
                    .map(|i| half * direct_mu[i] + half * g_mu_m[i] + half * through_outer[i])
                    .collect();
                let mut gc = a.sub(&fp.inv)?.scale(quarter);
                gc.axpy(half, &g_cov_m)?;
                out.grad_cov = gc.symmetrize();
            }
        }
        DivergenceKind::Hellinger => {
            let avg = p.cov.add(&q.cov)?.scale(half);
            let fb = factor(&avg)?;
            let delta = sub(&p.mean, &q.mean);
            let log_bc = quarter * fp.logdet + quarter * fq.logdet
                - half * fb.logdet
                - T::lit(0.125) * quad(&fb.inv, &delta);
            out.value = (-log_bc.exp_m1()).max(T::zero()).min(T::one());
            if want_grad {
                let bc = log_bc.exp();
                let b_delta = fb.inv.mul_vec(&delta)?;
                out.grad_mean = b_delta.iter().map(|&v| bc * quarter * v).collect();
                let mut dl = fp.inv.sub(&fb.inv)?.scale(quarter);
                dl.axpy(T::lit(1.0 / 16.0), &Matrix::outer(&b_delta, &b_delta))?;
                out.grad_cov = dl.scale(-bc);
            }
        }
        DivergenceKind::W2 => {
            let delta = sub(&p.mean, &q.mean);
            let b = bures(p, q)?;
            let w = (dot(&delta, &delta) + b.value).sqrt();
            out.value = w;
            if want_grad && w > T::zero() {
                let inv_w = T::one() / w;
                out.grad_mean = delta.iter().map(|&v| v * inv_w).collect();
                let floor = T::lit(1e3) * T::epsilon() * b.inner.values.last().copied().unwrap_or_else(T::one).abs();
                let c_inv_sqrt = b.inner.apply(|l| T::one() / l.max(floor).sqrt());
                let transport = b.sqrt_q.matmul(&c_inv_sqrt)?.matmul(&b.sqrt_q)?;
                out.grad_cov = Matrix::identity(d)
                    .sub(&transport)?
                    .symmetrize()
                    .scale(half * inv_w);
            }
        }
    }
    Ok(out)
}
