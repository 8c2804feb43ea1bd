use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::qspace::SamplingScheme;

/// Floor applied to signals before taking the logarithm.
pub const SIGNAL_FLOOR: f64 = 1e-8;
/// Replacement for negative fitted eigenvalues.
pub const EIGEN_FLOOR: f64 = 1e-7;

/// Per-voxel tensor fit and the scalar maps derived from it.
#[derive(Debug, Clone)]
pub struct DtiFit {
    pub tensors: Array2<Matrix3<f64>>,
    pub fa: Array2<f64>,
    pub md: Array2<f64>,
    /// RMS residual of the log-linear fit.
    pub residual: Array2<f64>,
    /// Voxels that were fitted; everything else is zero.
    pub mask: Array2<bool>,
}

/// Fractional anisotropy and mean diffusivity of a symmetric tensor.
///
/// `fa = sqrt(3/2) ‖T − md·I‖_F / ‖T‖_F`, zero for the zero tensor.
pub fn fa_md(t: &Matrix3<f64>) -> (f64, f64) {
    let md = t.trace() / 3.0;
    let norm = t.norm();
    if norm == 0.0 {
        return (0.0, md);
    }
    let dev = t - Matrix3::identity() * md;
    let fa = (1.5f64).sqrt() * dev.norm() / norm;
    (fa.clamp(0.0, 1.0), md)
}

fn design_row(g: &[f64; 3], b: f64) -> [f64; 7] {
    let [x, y, z] = *g;
    [
        1.0,
        -b * x * x,
        -b * y * y,
        -b * z * z,
        -2.0 * b * x * y,
        -2.0 * b * x * z,
        -2.0 * b * y * z,
    ]
}

fn unpack(x: &DVector<f64>) -> Matrix3<f64> {
    Matrix3::new(
        x[1], x[4], x[5], //
        x[4], x[2], x[6], //
        x[5], x[6], x[3],
    )
}

/// Log-linear least-squares tensor fit over a b0 + single-shell scheme.
///
/// Solves `ln S = ln S0 − b gᵀDg` for the six unique tensor entries and
/// `ln S0` at every masked voxel, symmetrizes, and replaces negative
/// eigenvalues with [`EIGEN_FLOOR`].
pub fn fit_dti(dwis: &Array3<f64>, scheme: &SamplingScheme, mask: &Array2<bool>) -> Result<DtiFit> {
    let (n, h, w) = dwis.dim();
    if n != scheme.len() {
        return Err(Error::shape(format!(
            "{n} volumes but scheme has {} points",
            scheme.len()
        )));
    }
    if mask.dim() != (h, w) {
        return Err(Error::shape(format!(
            "mask {:?} does not match volumes {:?}",
            mask.dim(),
            (h, w)
        )));
    }
    let shells: Vec<f64> = scheme.shells().into_iter().filter(|&b| b > 0.0).collect();
    if shells.len() > 1 {
        return Err(Error::domain(format!(
            "tensor fit expects b = 0 plus one shell, got shells {shells:?}"
        )));
    }
    if n < 7 {
        return Err(Error::domain(format!("{n} points; tensor fit needs at least 7")));
    }

    let design = DMatrix::from_fn(n, 7, |r, c| {
        let p = &scheme.points[r];
        design_row(&p.g, p.b)[c]
    });
    // Rank check on the column-equilibrated design.
    let mut scaled = design.clone();
    for mut col in scaled.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let sv = scaled.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if !(smin > 1e-10 * smax) {
        return Err(Error::Conditioning(format!(
            "design matrix is rank deficient (singular value ratio {:.3e})",
            smin / smax
        )));
    }
    let pinv = design
        .clone()
        .svd(true, true)
        .pseudo_inverse(0.0)
        .map_err(|e| Error::Conditioning(e.to_string()))?;

    let mut tensors = Array2::from_elem((h, w), Matrix3::zeros());
    let mut fa = Array2::zeros((h, w));
    let mut md = Array2::zeros((h, w));
    let mut residual = Array2::zeros((h, w));
    let mut log_s = DVector::zeros(n);

    for i in 0..h {
        for j in 0..w {
            if !mask[(i, j)] {
                continue;
            }
            for k in 0..n {
                log_s[k] = dwis[(k, i, j)].max(SIGNAL_FLOOR).ln();
            }
            let x = &pinv * &log_s;
            let fitted = &design * &x;
            let rss: f64 = (&log_s - fitted).norm_squared();
            let mut d = unpack(&x);
            d = (d + d.transpose()) * 0.5;
            let eig = d.symmetric_eigen();
            if eig.eigenvalues.iter().any(|&e| e < 0.0) {
                let lam = Vector3::from_iterator(
                    eig.eigenvalues.iter().map(|&e| if e < 0.0 { EIGEN_FLOOR } else { e }),
                );
                d = eig.eigenvectors * Matrix3::from_diagonal(&lam) * eig.eigenvectors.transpose();
                d = (d + d.transpose()) * 0.5;
            }
            let (f, m) = fa_md(&d);
            tensors[(i, j)] = d;
            fa[(i, j)] = f;
            md[(i, j)] = m;
            residual[(i, j)] = (rss / n as f64).sqrt();
        }
    }
    Ok(DtiFit {
        tensors,
        fa,
        md,
        residual,
        mask: mask.clone(),
    })
}
