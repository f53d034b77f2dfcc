//! Generalized least squares kernel shared by the mixed models.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// GLS estimate `beta = (X'V^-1 X)^-1 X'V^-1 y` with covariance
/// `(X'V^-1 X)^-1`, computed through the Cholesky factor of `V` (never an
/// explicit inverse).
pub fn gls_estimate(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    v: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n || v.nrows() != n || v.ncols() != n {
        return Err(Error::Data("GLS dimension mismatch".into()));
    }
    let chol = v
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Covariance("marginal covariance not positive definite".into()))?;
    let l = chol.l();
    // whiten: xt = L^-1 X, yt = L^-1 y
    let xt = l
        .solve_lower_triangular(x)
        .ok_or_else(|| Error::Covariance("singular Cholesky factor".into()))?;
    let yt = l
        .solve_lower_triangular(y)
        .ok_or_else(|| Error::Covariance("singular Cholesky factor".into()))?;
    let a = xt.transpose() * &xt;
    let achol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularDesign(format!("X'V^-1X singular (p = {p})")))?;
    let beta = achol.solve(&(xt.transpose() * &yt));
    let cov = achol.inverse();
    Ok((beta, cov))
}
