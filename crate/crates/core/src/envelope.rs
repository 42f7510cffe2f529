//! Groupwise envelope estimation for data with known (or imputed) labels.
//!
//! The shared basis Gamma is estimated by minimizing
//!
//! ```text
//! F(Gamma) = sum_k (n_k/n) log det(Gamma^T S_res,k Gamma)
//!          + log det(Gamma^T S_Y^{-1} Gamma)
//! ```
//!
//! over the Grassmann manifold of u-dimensional subspaces of R^r, by
//! projected gradient descent with QR retraction and Armijo backtracking,
//! multi-started because the objective is nonconvex. All remaining
//! parameters then have closed forms in Gamma.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Dataset, EnvelopeBasis, GroupParams, LabelVector};
use crate::rng::{derive_seed, rng_from};

/// Groups below this size cannot support a covariance fit; callers route
/// violations to their empty-cluster policy.
pub fn min_group_size(u: usize) -> usize {
    2.max(u + 1)
}

/// Per-group sufficient statistics for envelope estimation.
#[derive(Debug, Clone)]
pub struct GroupedMoments {
    /// Centered response matrices, one n_k x r block per group.
    pub y_c: Vec<DMatrix<f64>>,
    /// Centered predictor matrices, one n_k x p block per group.
    pub x_c: Vec<DMatrix<f64>>,
    /// Residual covariances S_res,k = (1/n_k) Y_c^T Q_{X_k} Y_c.
    pub sigma_res: Vec<DMatrix<f64>>,
    /// Pooled response covariance S_Y = (1/n) sum_k Y_c^T Y_c (group-centered).
    pub sigma_y: DMatrix<f64>,
    /// Inverse of S_Y (ridged if the factorization required it).
    pub sigma_y_inv: DMatrix<f64>,
    /// Per-group OLS coefficients (Y_c^T X_c)(X_c^T X_c)^{-1}, r x p.
    pub ols_coef: Vec<DMatrix<f64>>,
    pub n_k: Vec<usize>,
    pub y_bar: Vec<DVector<f64>>,
    pub x_bar: Vec<DVector<f64>>,
    pub n: usize,
}

impl GroupedMoments {
    pub fn m(&self) -> usize {
        self.n_k.len()
    }

    pub fn r(&self) -> usize {
        self.sigma_y.nrows()
    }

    pub fn p(&self) -> usize {
        self.x_bar[0].len()
    }

    /// Group weight n_k / n.
    pub fn weight(&self, k: usize) -> f64 {
        self.n_k[k] as f64 / self.n as f64
    }

    /// Pooled residual covariance sum_k (n_k/n) S_res,k.
    pub fn pooled_sigma_res(&self) -> DMatrix<f64> {
        let r = self.r();
        let mut pooled = DMatrix::zeros(r, r);
        for k in 0..self.m() {
            pooled += &self.sigma_res[k] * self.weight(k);
        }
        pooled
    }
}

/// Group means and centered blocks, residual and pooled covariances.
pub fn compute_moments(
    data: &Dataset,
    labels: &LabelVector,
    m: usize,
    min_size: usize,
) -> Result<GroupedMoments> {
    if labels.len() != data.n() {
        return Err(crate::error::dim_err("compute_moments labels", data.n(), labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&l| l < 1 || l > m) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 1..={m}")));
    }
    let (r, p, n) = (data.r(), data.p(), data.n());
    let mut y_c = Vec::with_capacity(m);
    let mut x_c = Vec::with_capacity(m);
    let mut sigma_res = Vec::with_capacity(m);
    let mut ols_coef = Vec::with_capacity(m);
    let mut n_k = Vec::with_capacity(m);
    let mut y_bar = Vec::with_capacity(m);
    let mut x_bar = Vec::with_capacity(m);
    let mut sigma_y = DMatrix::zeros(r, r);

    for k in 1..=m {
        let idx = labels.group_indices(k);
        if idx.len() < min_size {
            return Err(Error::EmptyGroup {
                group: k,
                size: idx.len(),
                min: min_size,
            });
        }
        let nk = idx.len();
        let mut yk = DMatrix::zeros(nk, r);
        let mut xk = DMatrix::zeros(nk, p);
        for (row, &i) in idx.iter().enumerate() {
            yk.row_mut(row).copy_from(&data.y().row(i));
            xk.row_mut(row).copy_from(&data.x().row(i));
        }
        let ybar = yk.row_mean().transpose();
        let xbar = xk.row_mean().transpose();
        for row in 0..nk {
            for j in 0..r {
                yk[(row, j)] -= ybar[j];
            }
            for j in 0..p {
                xk[(row, j)] -= xbar[j];
            }
        }
        let xtx = xk.transpose() * &xk;
        let xty = xk.transpose() * &yk;
        let b = linalg::solve_spd(&xtx, &xty, "X^T X")?; // p x r
        let resid = &yk - &xk * &b;
        let mut s_res = resid.transpose() * &resid / nk as f64;
        linalg::symmetrize(&mut s_res);
        sigma_y += yk.transpose() * &yk;

        y_c.push(yk);
        x_c.push(xk);
        sigma_res.push(s_res);
        ols_coef.push(b.transpose());
        n_k.push(nk);
        y_bar.push(ybar);
        x_bar.push(xbar);
    }
    sigma_y /= n as f64;
    linalg::symmetrize(&mut sigma_y);
    // S_Y must be invertible for the objective; ridge into the stored matrix
    // if the factorization fails so moments and inverse stay consistent.
    if sigma_y.clone().cholesky().is_none() {
        let lambda = linalg::ridge_level(&sigma_y);
        for i in 0..r {
            sigma_y[(i, i)] += lambda;
        }
    }
    let sigma_y_inv = linalg::inv_spd(&sigma_y, "Sigma_Y")?;

    Ok(GroupedMoments {
        y_c,
        x_c,
        sigma_res,
        sigma_y,
        sigma_y_inv,
        ols_coef,
        n_k,
        y_bar,
        x_bar,
        n,
    })
}

/// Options for the Grassmann optimizer.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub n_starts: usize,
    pub seed: u64,
    /// Extra starting point, tried first; used to warm-start successive fits.
    pub warm_start: Option<DMatrix<f64>>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-8,
            n_starts: 5,
            seed: 0,
            warm_start: None,
        }
    }
}

impl OptimizerConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// Result of the basis search.
#[derive(Debug, Clone)]
pub struct GammaFit {
    pub basis: EnvelopeBasis,
    pub objective: f64,
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// F(Gamma) for orthonormal Gamma. Invariant under Gamma -> Gamma O.
pub fn grassmann_objective(gamma: &DMatrix<f64>, moments: &GroupedMoments) -> Result<f64> {
    objective_with(gamma, &moments.sigma_res, moments)
}

fn objective_with(
    gamma: &DMatrix<f64>,
    sigma_res: &[DMatrix<f64>],
    moments: &GroupedMoments,
) -> Result<f64> {
    let singular = |_| Error::Singular("grassmann objective inner matrix".into());
    let mut value = 0.0;
    for (k, s) in sigma_res.iter().enumerate() {
        let inner = gamma.transpose() * s * gamma;
        value += moments.weight(k) * linalg::sym_logdet(&inner, "Gamma^T S_res Gamma").map_err(singular)?;
    }
    let inner = gamma.transpose() * &moments.sigma_y_inv * gamma;
    value += linalg::sym_logdet(&inner, "Gamma^T S_Y^-1 Gamma").map_err(singular)?;
    Ok(value)
}

fn euclidean_gradient(
    gamma: &DMatrix<f64>,
    sigma_res: &[DMatrix<f64>],
    moments: &GroupedMoments,
) -> Result<DMatrix<f64>> {
    let (r, u) = gamma.shape();
    let mut grad = DMatrix::zeros(r, u);
    for (k, s) in sigma_res.iter().enumerate() {
        let sg = s * gamma;
        let inner = gamma.transpose() * &sg;
        let inv = linalg::inv_spd(&inner, "objective gradient")?;
        grad += &sg * inv * (2.0 * moments.weight(k));
    }
    let sg = &moments.sigma_y_inv * gamma;
    let inner = gamma.transpose() * &sg;
    let inv = linalg::inv_spd(&inner, "objective gradient")?;
    grad += &sg * inv * 2.0;
    Ok(grad)
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

fn optimize_from(
    start: DMatrix<f64>,
    sigma_res: &[DMatrix<f64>],
    moments: &GroupedMoments,
    cfg: &OptimizerConfig,
) -> Option<(DMatrix<f64>, f64, Vec<f64>, bool)> {
    let mut gamma = start;
    let mut f = objective_with(&gamma, sigma_res, moments).ok()?;
    let mut trace = vec![f];
    let mut step = 1.0;
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let grad_e = match euclidean_gradient(&gamma, sigma_res, moments) {
            Ok(g) => g,
            Err(_) => break,
        };
        // Tangent projection for the quotient geometry: (I - Gamma Gamma^T) grad.
        let grad = &grad_e - &gamma * (gamma.transpose() * &grad_e);
        let gnorm2 = grad.norm_squared();
        if gnorm2.sqrt() < cfg.grad_tol {
            converged = true;
            break;
        }
        let mut accepted = false;
        let mut t = step;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = linalg::qf(&(&gamma - &grad * t));
            match objective_with(&candidate, sigma_res, moments) {
                Ok(fc) if fc <= f - ARMIJO_C * t * gnorm2 => {
                    gamma = candidate;
                    f = fc;
                    trace.push(fc);
                    step = (t * 2.0).min(1e3);
                    accepted = true;
                    break;
                }
                _ => t *= 0.5,
            }
        }
        if !accepted {
            // No descent direction at line-search resolution: stationary.
            converged = true;
            break;
        }
    }
    Some((gamma, f, trace, converged))
}

/// Estimate the shared basis for dimension u (1 <= u <= r-1).
///
/// Starts from the top-u eigenvectors of S_Y, the top-u eigenvectors of the
/// pooled S_res, any warm start, and `n_starts - 2` random orthonormal
/// matrices; the best objective wins, ties broken by start order. If every
/// start fails to evaluate, the residual covariances are ridged and the
/// search retried before giving up.
pub fn fit_gamma(moments: &GroupedMoments, u: usize, cfg: &OptimizerConfig) -> Result<GammaFit> {
    let r = moments.r();
    if u == 0 || u >= r {
        return Err(Error::InvalidArgument(format!(
            "fit_gamma requires 1 <= u <= r-1, got u={u}, r={r}"
        )));
    }
    let mut starts: Vec<DMatrix<f64>> = Vec::new();
    if let Some(warm) = &cfg.warm_start {
        if warm.shape() == (r, u) {
            starts.push(warm.clone());
        }
    }
    let (_, vecs_y) = linalg::sym_eigen_desc(&moments.sigma_y);
    starts.push(vecs_y.columns(0, u).into_owned());
    let (_, vecs_res) = linalg::sym_eigen_desc(&moments.pooled_sigma_res());
    starts.push(vecs_res.columns(0, u).into_owned());
    for s in 0..cfg.n_starts.saturating_sub(2) {
        let mut rng = rng_from(derive_seed(cfg.seed, 0x6a5 + s as u64));
        starts.push(linalg::random_orthonormal(r, u, &mut rng));
    }

    for attempt in 0..3 {
        let sigma_res: Vec<DMatrix<f64>> = if attempt == 0 {
            moments.sigma_res.clone()
        } else {
            moments
                .sigma_res
                .iter()
                .map(|s| {
                    let lambda =
                        linalg::ridge_level(s) * 10f64.powi(attempt - 1);
                    let mut out = s.clone();
                    for i in 0..out.nrows() {
                        out[(i, i)] += lambda;
                    }
                    out
                })
                .collect()
        };
        let mut best: Option<(DMatrix<f64>, f64, Vec<f64>, bool)> = None;
        for start in &starts {
            if let Some(result) = optimize_from(start.clone(), &sigma_res, moments, cfg) {
                let better = match &best {
                    None => true,
                    Some((_, bf, _, _)) => result.1 < *bf,
                };
                if better {
                    best = Some(result);
                }
            }
        }
        if let Some((gamma, objective, trace, converged)) = best {
            let basis = EnvelopeBasis::from_gamma(gamma)?;
            return Ok(GammaFit {
                basis,
                objective,
                trace,
                converged,
            });
        }
    }
    Err(Error::Singular("fit_gamma: all starts failed".into()))
}

/// Complete groupwise fit: basis, per-group parameters, coefficients.
#[derive(Debug, Clone)]
pub struct GroupwiseFit {
    pub basis: EnvelopeBasis,
    /// Per-group parameters; `mu` holds the group response mean.
    pub groups: Vec<GroupParams>,
    pub omega0: DMatrix<f64>,
    /// beta_k = Gamma eta_k, r x p.
    pub beta: Vec<DMatrix<f64>>,
    /// Group predictor means, needed to express the fit in uncentered form.
    pub x_bar: Vec<DVector<f64>>,
    pub objective_value: f64,
    pub optimizer_trace: Vec<f64>,
    pub optimizer_converged: bool,
}

impl GroupwiseFit {
    pub fn m(&self) -> usize {
        self.groups.len()
    }

    /// Intercept of group k in the uncentered-predictor parameterization:
    /// ybar_k - beta_k xbar_k, i.e. the mu for which the conditional mean is
    /// mu + beta_k x at raw x.
    pub fn intercept(&self, k: usize) -> DVector<f64> {
        &self.groups[k].mu - &self.beta[k] * &self.x_bar[k]
    }
}

fn ensure_pd(mut a: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if a.nrows() == 0 || a.clone().cholesky().is_some() {
        return Ok(a);
    }
    let mut lambda = linalg::ridge_level(&a);
    for _ in 0..4 {
        let mut trial = a.clone();
        for i in 0..trial.nrows() {
            trial[(i, i)] += lambda;
        }
        if trial.clone().cholesky().is_some() {
            a = trial;
            return Ok(a);
        }
        lambda *= 10.0;
    }
    Err(Error::Singular(what.to_string()))
}

/// Closed-form estimators given the basis:
/// mu_k = ybar_k, eta_k = Gamma^T (Y_c^T X_c)(X_c^T X_c)^{-1},
/// Omega_k = Gamma^T S_res,k Gamma, Omega0 = Gamma0^T S_Y Gamma0.
pub fn coordinate_estimates(basis: &EnvelopeBasis, moments: &GroupedMoments) -> Result<GroupwiseFit> {
    let u = basis.u();
    if basis.r() != moments.r() {
        return Err(crate::error::dim_err("coordinate_estimates", moments.r(), basis.r()));
    }
    let mut groups = Vec::with_capacity(moments.m());
    let mut beta = Vec::with_capacity(moments.m());
    for k in 0..moments.m() {
        let eta = basis.gamma().transpose() * &moments.ols_coef[k];
        let mut omega = basis.gamma().transpose() * &moments.sigma_res[k] * basis.gamma();
        linalg::symmetrize(&mut omega);
        let omega = ensure_pd(omega, "Omega_k")?;
        beta.push(basis.gamma() * &eta);
        groups.push(GroupParams::new(moments.y_bar[k].clone(), eta, omega)?);
    }
    let mut omega0 = basis.gamma0().transpose() * &moments.sigma_y * basis.gamma0();
    linalg::symmetrize(&mut omega0);
    let omega0 = ensure_pd(omega0, "Omega0")?;
    let objective_value = if u == 0 || u == basis.r() {
        grassmann_objective(basis.gamma(), moments).unwrap_or(f64::NAN)
    } else {
        grassmann_objective(basis.gamma(), moments)?
    };
    Ok(GroupwiseFit {
        basis: basis.clone(),
        groups,
        omega0,
        beta,
        x_bar: moments.x_bar.clone(),
        objective_value,
        optimizer_trace: Vec::new(),
        optimizer_converged: true,
    })
}

/// Full pipeline: moments -> basis (closed form at u in {0, r}) -> coordinates.
pub fn fit_groupwise_envelope(
    data: &Dataset,
    labels: &LabelVector,
    m: usize,
    u: usize,
    cfg: &OptimizerConfig,
) -> Result<GroupwiseFit> {
    let r = data.r();
    if u > r {
        return Err(Error::InvalidArgument(format!("u={u} exceeds r={r}")));
    }
    let moments = compute_moments(data, labels, m, min_group_size(u))?;
    fit_groupwise_envelope_from_moments(&moments, u, cfg)
}

pub fn fit_groupwise_envelope_from_moments(
    moments: &GroupedMoments,
    u: usize,
    cfg: &OptimizerConfig,
) -> Result<GroupwiseFit> {
    let r = moments.r();
    if u == 0 {
        return coordinate_estimates(&EnvelopeBasis::empty(r), moments);
    }
    if u == r {
        return coordinate_estimates(&EnvelopeBasis::full(r), moments);
    }
    let gamma_fit = fit_gamma(moments, u, cfg)?;
    let mut fit = coordinate_estimates(&gamma_fit.basis, moments)?;
    fit.objective_value = gamma_fit.objective;
    fit.optimizer_trace = gamma_fit.trace;
    fit.optimizer_converged = gamma_fit.converged;
    Ok(fit)
}
