//! Two-component PCA for exporting feature clouds to a plane.

use crate::error::{LdcError, Result};
use crate::linalg::{sym_eigen, Matrix};
use crate::linstats::estimate_mean_cov;

#[derive(Clone, Debug)]
pub struct Projection {
    /// `n × 2` coordinates of the centred rows on the two leading axes.
    pub coords: Matrix<f64>,
    /// Leading principal axes, one per row.
    pub axes: Matrix<f64>,
    /// `(λ1 + λ2) / Σλ`.
    pub variance_fraction: f64,
}

/// Projects `rows` onto their top two principal components. Each axis is
/// signed so that its largest-magnitude entry is positive, which makes the
/// output a function of the data alone.
pub fn pca2(rows: &Matrix<f64>) -> Result<Projection> {
    if rows.rows() < 3 {
        return Err(LdcError::InsufficientSamples { available: rows.rows(), required: 3 });
    }
    if rows.cols() < 2 {
        return Err(LdcError::InvalidParameter("projection needs at least two feature columns".into()));
    }
    let stats = estimate_mean_cov(rows)?;
    let eig = sym_eigen(&stats.cov)?;
    let total: f64 = eig.values.iter().map(|v| v.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(LdcError::DegenerateSpectrum);
    }
    let d = rows.cols();
    let mut axes = Matrix::zeros(2, d);
    for k in 0..2 {
        let mut v = eig.vectors.column(d - 1 - k);
        let pivot = v.iter().copied().fold(0.0, |m: f64, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.row_mut(k).copy_from_slice(&v);
    }
    let centred = Matrix::from_fn(rows.rows(), d, |i, j| rows[(i, j)] - stats.mean[j]);
    let coords = centred.matmul_t(&axes)?;
    let top = eig.values[d - 1].max(0.0) + eig.values[d - 2].max(0.0);
    Ok(Projection {
        coords,
        axes,
        variance_fraction: (top / total).clamp(0.0, 1.0),
    })
}
