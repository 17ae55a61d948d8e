//! Canonical-correlation objective for two warped views.
//!
//! The objective is the nuclear norm of the whitened cross-covariance
//! `K = S11^{-1/2} S12 S22^{-1/2}` of two `d x T` feature matrices, where
//! the covariances use the centering matrix and a `1/(T-1)` normalizer and a
//! ridge term keeps the per-view covariances invertible. The subgradient
//! w.r.t. each view is computed in closed form from the SVD of `K`.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Factorization byproducts of one correlation evaluation.
#[derive(Debug, Clone)]
pub struct CorrelationWitness {
    /// View-1 covariance with ridge added.
    pub sigma11: Tensor,
    /// View-2 covariance with ridge added.
    pub sigma22: Tensor,
    /// Cross covariance.
    pub sigma12: Tensor,
    /// Left singular vectors of `K`.
    pub u: Tensor,
    /// Singular values of `K`, nonincreasing.
    pub s: Vec<f64>,
    /// Right singular vectors of `K` (columns).
    pub v: Tensor,
    pub ridge: f64,
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(vec![m.nrows(), m.ncols()], data).expect("dense matrix")
}

/// Subtract the row mean from each row (multiplication by the centering
/// matrix `I - 11^T/T` on the right).
fn center_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let t = m.ncols() as f64;
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.iter().sum::<f64>() / t;
        for x in row.iter_mut() {
            *x -= mean;
        }
    }
    out
}

/// Symmetric inverse square root via eigendecomposition. Errors if the
/// matrix stays effectively singular after the ridge was added.
fn sym_inv_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if min_eig <= 1e-12 * max_eig.max(f64::MIN_POSITIVE) {
        return Err(Error::Conditioning {
            min_eigenvalue: min_eig,
            detail: format!("{what} is singular even after ridge addition"),
        });
    }
    let q = &eig.eigenvectors;
    let inv_sqrt = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| 1.0 / l.sqrt()),
    );
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= inv_sqrt[j];
    }
    Ok(&scaled * q.transpose())
}

/// SVD with singular values sorted nonincreasing.
fn sorted_svd(k: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = k.clone().svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let s: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u_sorted = DMatrix::from_fn(u.nrows(), order.len(), |i, j| u[(i, order[j])]);
    let v_sorted = DMatrix::from_fn(v_t.ncols(), order.len(), |i, j| v_t[(order[j], i)]);
    (u_sorted, s, v_sorted)
}

/// Nuclear-norm correlation of two same-shape `d x T` views and its
/// subgradient w.r.t. both views.
///
/// Returns `(value, d_value/d_h1, d_value/d_h2, witness)`.
pub fn correlation_objective(
    h1: &Tensor,
    h2: &Tensor,
    ridge: f64,
) -> Result<(f64, Tensor, Tensor, CorrelationWitness)> {
    if h1.shape().len() != 2 || !h1.same_shape(h2) {
        return Err(Error::contract(
            "correlation_objective",
            format!(
                "views must share a 2D shape, got {:?} and {:?}",
                h1.shape(),
                h2.shape()
            ),
        ));
    }
    let (d, t) = (h1.rows(), h1.cols());
    if t < 2 || d < 1 {
        return Err(Error::contract(
            "correlation_objective",
            format!("need d >= 1 and T >= 2, got {d} x {t}"),
        ));
    }
    if !ridge.is_finite() || ridge < 0.0 {
        return Err(Error::contract(
            "correlation_objective",
            format!("ridge must be a nonnegative real, got {ridge}"),
        ));
    }
    let norm = 1.0 / (t as f64 - 1.0);
    let hc1 = center_rows(&to_dmatrix(h1));
    let hc2 = center_rows(&to_dmatrix(h2));
    let eye = DMatrix::<f64>::identity(d, d);
    let sigma11 = &hc1 * hc1.transpose() * norm + &eye * ridge;
    let sigma22 = &hc2 * hc2.transpose() * norm + &eye * ridge;
    let sigma12 = &hc1 * hc2.transpose() * norm;

    let is1 = sym_inv_sqrt(&sigma11, "sigma11")?;
    let is2 = sym_inv_sqrt(&sigma22, "sigma22")?;
    let k = &is1 * &sigma12 * &is2;
    let (u, s, v) = sorted_svd(&k);
    let value: f64 = s.iter().sum();

    let s_diag = DMatrix::from_diagonal(&DVector::from_vec(s.clone()));
    // d value / d H1 = [ S11^-1/2 U V^T S22^-1/2 Hc2  -  S11^-1/2 U S U^T S11^-1/2 Hc1 ] / (T-1)
    let plus1 = &is1 * &u * v.transpose() * &is2 * &hc2;
    let minus1 = &is1 * &u * &s_diag * u.transpose() * &is1 * &hc1;
    let d_h1 = (plus1 - minus1) * norm;
    // Symmetric formula with the views swapped (K for the swapped problem is K^T = V S U^T).
    let plus2 = &is2 * &v * u.transpose() * &is1 * &hc1;
    let minus2 = &is2 * &v * &s_diag * v.transpose() * &is2 * &hc2;
    let d_h2 = (plus2 - minus2) * norm;

    let witness = CorrelationWitness {
        sigma11: from_dmatrix(&sigma11),
        sigma22: from_dmatrix(&sigma22),
        sigma12: from_dmatrix(&sigma12),
        u: from_dmatrix(&u),
        s,
        v: from_dmatrix(&v),
        ridge,
    };
    Ok((value, from_dmatrix(&d_h1), from_dmatrix(&d_h2), witness))
}
