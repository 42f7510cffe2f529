//! Small dense linear-algebra helpers shared across the crate.
//!
//! Log-determinants and SPD solves go through Cholesky; when a factorization
//! fails the caller-facing wrappers retry with an escalating ridge
//! `lambda = 1e-8 * trace/dim` (x10 per retry, a few steps) before surfacing
//! a typed error. NaNs are never propagated silently.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const RIDGE_REL: f64 = 1e-8;
const RIDGE_ESCALATIONS: usize = 4;

/// Symmetrize in place: (A + A^T) / 2.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let at = a.transpose();
    *a += at;
    *a *= 0.5;
}

/// Base ridge level for a symmetric matrix: RIDGE_REL * trace/dim, with a
/// floor so an exactly-zero matrix still gets a usable jitter.
pub fn ridge_level(a: &DMatrix<f64>) -> f64 {
    let dim = a.nrows().max(1) as f64;
    let scale = a.trace().abs() / dim;
    if scale > 0.0 {
        RIDGE_REL * scale
    } else {
        RIDGE_REL
    }
}

fn add_ridge(a: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let mut out = a.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += lambda;
    }
    out
}

/// log det of a symmetric positive-definite matrix via Cholesky.
/// An empty (0x0) matrix has determinant 1, hence log-determinant 0.
pub fn sym_logdet(a: &DMatrix<f64>, context: &str) -> Result<f64> {
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    match a.clone().cholesky() {
        Some(chol) => {
            let mut acc = 0.0;
            for i in 0..a.nrows() {
                acc += chol.l_dirty()[(i, i)].ln();
            }
            Ok(2.0 * acc)
        }
        None => Err(Error::NotPositiveDefinite(context.to_string())),
    }
}

/// log det with ridge escalation on factorization failure.
pub fn sym_logdet_ridged(a: &DMatrix<f64>, context: &str) -> Result<f64> {
    if let Ok(v) = sym_logdet(a, context) {
        return Ok(v);
    }
    let mut lambda = ridge_level(a);
    for _ in 0..RIDGE_ESCALATIONS {
        if let Ok(v) = sym_logdet(&add_ridge(a, lambda), context) {
            return Ok(v);
        }
        lambda *= 10.0;
    }
    Err(Error::Singular(context.to_string()))
}

/// Solve A X = B for symmetric positive-definite A, ridging A on failure.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Ok(DMatrix::zeros(0, b.ncols()));
    }
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    let mut lambda = ridge_level(a);
    for _ in 0..RIDGE_ESCALATIONS {
        if let Some(chol) = add_ridge(a, lambda).cholesky() {
            return Ok(chol.solve(b));
        }
        lambda *= 10.0;
    }
    Err(Error::Singular(context.to_string()))
}

/// Inverse of a symmetric positive-definite matrix, ridging on failure.
pub fn inv_spd(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let eye = DMatrix::identity(a.nrows(), a.nrows());
    solve_spd(a, &eye, context)
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = a.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .expect("NaN eigenvalue")
    });
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        vecs.set_column(c, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Thin Q factor of `a` with the sign convention diag(R) >= 0, so the
/// retraction is continuous in its argument.
pub fn qf(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = a.shape();
    let qr = a.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols.min(rows) {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col.neg_mut();
        }
    }
    q
}

/// Orthonormal completion of an r x u matrix with orthonormal columns:
/// returns r x (r-u) whose columns are orthonormal and orthogonal to `gamma`.
pub fn orthonormal_completion(gamma: &DMatrix<f64>) -> DMatrix<f64> {
    let r = gamma.nrows();
    let u = gamma.ncols();
    if u == r {
        return DMatrix::zeros(r, 0);
    }
    if u == 0 {
        return DMatrix::identity(r, r);
    }
    // Full QR of [gamma | I]: the first u columns of Q span gamma, the rest
    // span its orthocomplement.
    let mut wide = DMatrix::zeros(r, u + r);
    wide.view_mut((0, 0), (r, u)).copy_from(gamma);
    wide.view_mut((0, u), (r, r))
        .copy_from(&DMatrix::identity(r, r));
    let q = wide.qr().q();
    q.columns(u, r - u).into_owned()
}

/// Random matrix with orthonormal columns (Q factor of a Gaussian draw).
pub fn random_orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
    qf(&g)
}

/// Max absolute deviation of G^T G from the identity.
pub fn orthonormality_defect(g: &DMatrix<f64>) -> f64 {
    let gram = g.transpose() * g;
    let mut worst: f64 = 0.0;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// Multivariate normal log-density with explicit mean and covariance.
pub fn mvn_logpdf(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let r = y.len();
    if mean.len() != r || cov.nrows() != r || cov.ncols() != r {
        return Err(crate::error::dim_err(
            "mvn_logpdf",
            format!("{r}-dim mean/cov"),
            format!("mean {}, cov {}x{}", mean.len(), cov.nrows(), cov.ncols()),
        ));
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("mvn_logpdf covariance".into()))?;
    let mut logdet = 0.0;
    for i in 0..r {
        logdet += chol.l_dirty()[(i, i)].ln();
    }
    let diff = y - mean;
    let solved = chol.solve(&diff);
    let quad = diff.dot(&solved);
    Ok(-0.5 * (r as f64) * (2.0 * std::f64::consts::PI).ln() - logdet - 0.5 * quad)
}
