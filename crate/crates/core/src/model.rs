//! Model types and density evaluation for the mixture envelope regression
//! model.
//!
//! Each of the M groups shares an envelope basis (Gamma, Gamma0) of dimension
//! u and an immaterial covariance Omega0; group k has its own mean mu_k,
//! coordinate matrix eta_k and material covariance Omega_k, so that
//! beta_k = Gamma eta_k and Sigma_k = Gamma Omega_k Gamma^T + Gamma0 Omega0 Gamma0^T.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};
use crate::linalg;

/// Mixing proportions are clipped below this and renormalized so that
/// log(pi_k) stays finite in the responsibility computation.
pub const PI_FLOOR: f64 = 1e-6;

const ORTHO_TOL: f64 = 1e-10;
const SYM_TOL: f64 = 1e-10;

/// Paired predictor/response observations, with optional ground-truth labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    true_labels: Option<LabelVector>,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        true_labels: Option<LabelVector>,
    ) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidArgument("dataset must be non-empty".into()));
        }
        if x.nrows() != y.nrows() {
            return Err(dim_err("Dataset rows", x.nrows(), y.nrows()));
        }
        if let Some(labels) = &true_labels {
            if labels.len() != x.nrows() {
                return Err(dim_err("Dataset labels", x.nrows(), labels.len()));
            }
        }
        Ok(Self { x, y, true_labels })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn r(&self) -> usize {
        self.y.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn true_labels(&self) -> Option<&LabelVector> {
        self.true_labels.as_ref()
    }

    pub fn x_row(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }

    pub fn y_row(&self, i: usize) -> DVector<f64> {
        self.y.row(i).transpose()
    }

    /// New dataset from a subset of row indices (repeats allowed).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let x = DMatrix::from_fn(indices.len(), self.p(), |i, j| self.x[(indices[i], j)]);
        let y = DMatrix::from_fn(indices.len(), self.r(), |i, j| self.y[(indices[i], j)]);
        let labels = self
            .true_labels
            .as_ref()
            .map(|l| LabelVector::new_unchecked(indices.iter().map(|&i| l.get(i)).collect()));
        Dataset::new(x, y, labels)
    }
}

/// Imputed or known cluster labels, 1-based (values in 1..=M).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(Vec<usize>);

impl LabelVector {
    pub fn new(labels: Vec<usize>, m: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l < 1 || l > m) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside 1..={m}"
            )));
        }
        Ok(Self(labels))
    }

    pub(crate) fn new_unchecked(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// 1-based label of observation i.
    pub fn get(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    /// Row indices belonging to group k (1-based k).
    pub fn group_indices(&self, k: usize) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == k).then_some(i))
            .collect()
    }

    /// Group sizes n_1..n_M.
    pub fn counts(&self, m: usize) -> Vec<usize> {
        let mut counts = vec![0usize; m];
        for &l in &self.0 {
            counts[l - 1] += 1;
        }
        counts
    }
}

/// Orthonormal basis pair for the envelope subspace and its complement.
/// u = 0 leaves Gamma with zero columns; u = r leaves Gamma0 with zero columns.
#[derive(Debug, Clone)]
pub struct EnvelopeBasis {
    gamma: DMatrix<f64>,
    gamma0: DMatrix<f64>,
}

impl EnvelopeBasis {
    pub fn new(gamma: DMatrix<f64>, gamma0: DMatrix<f64>) -> Result<Self> {
        let r = gamma.nrows();
        if gamma0.nrows() != r && gamma0.ncols() != 0 {
            return Err(dim_err("EnvelopeBasis rows", r, gamma0.nrows()));
        }
        if gamma.ncols() + gamma0.ncols() != r {
            return Err(dim_err(
                "EnvelopeBasis columns",
                r,
                gamma.ncols() + gamma0.ncols(),
            ));
        }
        if linalg::orthonormality_defect(&gamma) > ORTHO_TOL {
            return Err(Error::InvalidArgument(
                "Gamma columns are not orthonormal".into(),
            ));
        }
        if linalg::orthonormality_defect(&gamma0) > ORTHO_TOL {
            return Err(Error::InvalidArgument(
                "Gamma0 columns are not orthonormal".into(),
            ));
        }
        if gamma.ncols() > 0 && gamma0.ncols() > 0 {
            let cross = gamma.transpose() * &gamma0;
            if cross.amax() > ORTHO_TOL {
                return Err(Error::InvalidArgument(
                    "Gamma and Gamma0 are not orthogonal".into(),
                ));
            }
        }
        Ok(Self { gamma, gamma0 })
    }

    /// Build from Gamma alone, computing the orthonormal completion.
    pub fn from_gamma(gamma: DMatrix<f64>) -> Result<Self> {
        let gamma0 = linalg::orthonormal_completion(&gamma);
        Self::new(gamma, gamma0)
    }

    /// The u = r degeneracy with Gamma fixed to the identity.
    pub fn full(r: usize) -> Self {
        Self {
            gamma: DMatrix::identity(r, r),
            gamma0: DMatrix::zeros(r, 0),
        }
    }

    /// The u = 0 degeneracy: no material part, Gamma0 spans everything.
    pub fn empty(r: usize) -> Self {
        Self {
            gamma: DMatrix::zeros(r, 0),
            gamma0: DMatrix::identity(r, r),
        }
    }

    pub fn r(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn u(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn gamma0(&self) -> &DMatrix<f64> {
        &self.gamma0
    }

    /// Projection onto span(Gamma).
    pub fn projection(&self) -> DMatrix<f64> {
        &self.gamma * self.gamma.transpose()
    }
}

fn check_sym(a: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(dim_err(what, "square matrix", format!("{}x{}", a.nrows(), a.ncols())));
    }
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            if (a[(i, j)] - a[(j, i)]).abs() > SYM_TOL {
                return Err(Error::InvalidArgument(format!("{what} is not symmetric")));
            }
        }
    }
    Ok(())
}

fn check_spd(a: &DMatrix<f64>, what: &'static str) -> Result<()> {
    check_sym(a, what)?;
    if a.nrows() > 0 && a.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(what.to_string()));
    }
    Ok(())
}

/// Per-group parameters: mean mu_k, coordinates eta_k, material covariance
/// Omega_k. The coefficient matrix beta_k = Gamma eta_k is derived on demand.
#[derive(Debug, Clone)]
pub struct GroupParams {
    pub mu: DVector<f64>,
    pub eta: DMatrix<f64>,
    pub omega: DMatrix<f64>,
}

impl GroupParams {
    pub fn new(mu: DVector<f64>, eta: DMatrix<f64>, omega: DMatrix<f64>) -> Result<Self> {
        check_spd(&omega, "Omega")?;
        if eta.nrows() != omega.nrows() {
            return Err(dim_err("GroupParams eta rows", omega.nrows(), eta.nrows()));
        }
        Ok(Self { mu, eta, omega })
    }
}

/// Full mixture parameter collection: proportions, per-group parameters, the
/// shared basis and the shared immaterial covariance.
#[derive(Debug, Clone)]
pub struct MixtureParams {
    pub pi: Vec<f64>,
    pub groups: Vec<GroupParams>,
    pub basis: EnvelopeBasis,
    pub omega0: DMatrix<f64>,
}

impl MixtureParams {
    pub fn new(
        pi: Vec<f64>,
        groups: Vec<GroupParams>,
        basis: EnvelopeBasis,
        omega0: DMatrix<f64>,
    ) -> Result<Self> {
        if pi.len() != groups.len() || pi.is_empty() {
            return Err(dim_err("MixtureParams groups", pi.len(), groups.len()));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "mixing proportions sum to {total}, not 1"
            )));
        }
        if pi.iter().any(|&p| p < PI_FLOOR || p >= 1.0 + 1e-12) {
            return Err(Error::InvalidArgument(
                "mixing proportion outside [pi_floor, 1]".into(),
            ));
        }
        let (r, u) = (basis.r(), basis.u());
        check_spd(&omega0, "Omega0")?;
        if omega0.nrows() != r - u {
            return Err(dim_err("Omega0 size", r - u, omega0.nrows()));
        }
        let p = groups[0].eta.ncols();
        for g in &groups {
            if g.mu.len() != r || g.eta.nrows() != u || g.eta.ncols() != p || g.omega.nrows() != u {
                return Err(dim_err(
                    "GroupParams dims",
                    format!("mu {r}, eta {u}x{p}, Omega {u}x{u}"),
                    format!(
                        "mu {}, eta {}x{}, Omega {}x{}",
                        g.mu.len(),
                        g.eta.nrows(),
                        g.eta.ncols(),
                        g.omega.nrows(),
                        g.omega.ncols()
                    ),
                ));
            }
        }
        Ok(Self {
            pi,
            groups,
            basis,
            omega0,
        })
    }

    pub fn m(&self) -> usize {
        self.pi.len()
    }

    pub fn r(&self) -> usize {
        self.basis.r()
    }

    pub fn u(&self) -> usize {
        self.basis.u()
    }

    pub fn p(&self) -> usize {
        self.groups[0].eta.ncols()
    }

    /// Coefficient matrix beta_k = Gamma eta_k.
    pub fn beta(&self, k: usize) -> DMatrix<f64> {
        self.basis.gamma() * &self.groups[k].eta
    }

    /// Error covariance Sigma_k for group k.
    pub fn sigma(&self, k: usize) -> DMatrix<f64> {
        assemble_sigma(&self.basis, &self.groups[k].omega, &self.omega0)
            .expect("validated dimensions")
    }

    /// Conditional mean mu_k + beta_k x for group k.
    pub fn conditional_mean(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.groups[k].mu + self.beta(k) * x
    }

    /// Canonical representative of the (rotation-invariant) basis: columns of
    /// Gamma ordered by descending diagonal of the pi-pooled Omega, each
    /// column's first entry of magnitude > 1e-12 made positive; Gamma0 columns
    /// sign-fixed the same way. eta/Omega/Omega0 are transformed so the model
    /// is unchanged.
    pub fn canonicalize(&mut self) {
        let u = self.u();
        if u > 0 {
            let mut pooled = DMatrix::zeros(u, u);
            for (k, g) in self.groups.iter().enumerate() {
                pooled += &g.omega * self.pi[k];
            }
            let mut order: Vec<usize> = (0..u).collect();
            order.sort_by(|&a, &b| {
                pooled[(b, b)]
                    .partial_cmp(&pooled[(a, a)])
                    .expect("NaN in Omega diagonal")
            });
            let mut perm = DMatrix::<f64>::zeros(u, u);
            for (new, &old) in order.iter().enumerate() {
                perm[(old, new)] = 1.0;
            }
            let mut gamma = self.basis.gamma().clone() * &perm;
            let mut signs = DMatrix::<f64>::identity(u, u);
            for j in 0..u {
                if let Some(i) = (0..gamma.nrows()).find(|&i| gamma[(i, j)].abs() > 1e-12) {
                    if gamma[(i, j)] < 0.0 {
                        signs[(j, j)] = -1.0;
                    }
                }
            }
            gamma *= &signs;
            // Gamma -> Gamma * O requires eta -> O^T eta, Omega -> O^T Omega O.
            let rot = &perm * &signs;
            for g in &mut self.groups {
                g.eta = rot.transpose() * &g.eta;
                g.omega = rot.transpose() * &g.omega * &rot;
                linalg::symmetrize(&mut g.omega);
            }
            let gamma0 = self.basis.gamma0().clone();
            self.basis = EnvelopeBasis::new(gamma, gamma0).expect("rotation preserves validity");
        }
        let r0 = self.r() - u;
        if r0 > 0 {
            let mut gamma0 = self.basis.gamma0().clone();
            let mut signs0 = DMatrix::<f64>::identity(r0, r0);
            for j in 0..r0 {
                if let Some(i) = (0..gamma0.nrows()).find(|&i| gamma0[(i, j)].abs() > 1e-12) {
                    if gamma0[(i, j)] < 0.0 {
                        signs0[(j, j)] = -1.0;
                    }
                }
            }
            gamma0 *= &signs0;
            self.omega0 = signs0.transpose() * &self.omega0 * &signs0;
            linalg::symmetrize(&mut self.omega0);
            let gamma = self.basis.gamma().clone();
            self.basis = EnvelopeBasis::new(gamma, gamma0).expect("sign flip preserves validity");
        }
    }
}

/// Clip proportions at PI_FLOOR and renormalize the unclipped mass so the
/// vector sums to exactly 1 with every entry still >= PI_FLOOR.
pub fn floor_proportions(pi: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = pi.to_vec();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    for _ in 0..out.len() {
        let floored: Vec<bool> = out.iter().map(|&p| p <= PI_FLOOR).collect();
        let n_floored = floored.iter().filter(|&&f| f).count();
        if n_floored == 0 {
            break;
        }
        let free_mass = 1.0 - (n_floored as f64) * PI_FLOOR;
        let free_total: f64 = out
            .iter()
            .zip(&floored)
            .filter(|(_, &f)| !f)
            .map(|(&p, _)| p)
            .sum();
        let mut stable = true;
        for (p, &f) in out.iter_mut().zip(&floored) {
            if f {
                *p = PI_FLOOR;
            } else {
                *p = *p / free_total * free_mass;
                if *p < PI_FLOOR {
                    stable = false;
                }
            }
        }
        if stable {
            break;
        }
    }
    // Push residual rounding into the largest entry so the sum is exactly 1.
    let residual = 1.0 - out.iter().sum::<f64>();
    let argmax = out
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("NaN proportion"))
        .map(|(i, _)| i)
        .expect("non-empty");
    out[argmax] += residual;
    out
}

/// Sigma_k = Gamma Omega Gamma^T + Gamma0 Omega0 Gamma0^T.
pub fn assemble_sigma(
    basis: &EnvelopeBasis,
    omega: &DMatrix<f64>,
    omega0: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (r, u) = (basis.r(), basis.u());
    if omega.nrows() != u || omega.ncols() != u {
        return Err(dim_err("assemble_sigma Omega", u, omega.nrows()));
    }
    if omega0.nrows() != r - u || omega0.ncols() != r - u {
        return Err(dim_err("assemble_sigma Omega0", r - u, omega0.nrows()));
    }
    let mut sigma = DMatrix::zeros(r, r);
    if u > 0 {
        sigma += basis.gamma() * omega * basis.gamma().transpose();
    }
    if r - u > 0 {
        sigma += basis.gamma0() * omega0 * basis.gamma0().transpose();
    }
    linalg::symmetrize(&mut sigma);
    Ok(sigma)
}

/// Per-cluster log-density of (y | x) under group parameters `gp`:
/// -(r/2) log 2pi - 1/2 log|Omega0| - 1/2 log|Omega_k|
/// - 1/2 || Omega_k^{-1/2} Gamma^T (y - mu_k - Gamma eta_k x) ||^2
/// - 1/2 (y - mu_k)^T Gamma0 Omega0^{-1} Gamma0^T (y - mu_k).
pub fn log_density_k(
    x: &DVector<f64>,
    y: &DVector<f64>,
    gp: &GroupParams,
    basis: &EnvelopeBasis,
    omega0: &DMatrix<f64>,
) -> Result<f64> {
    let (r, u) = (basis.r(), basis.u());
    if y.len() != r {
        return Err(dim_err("log_density_k y", r, y.len()));
    }
    if x.len() != gp.eta.ncols() && u > 0 {
        return Err(dim_err("log_density_k x", gp.eta.ncols(), x.len()));
    }
    let ld0 = linalg::sym_logdet(omega0, "Omega0")?;
    let ldk = linalg::sym_logdet(&gp.omega, "Omega_k")?;
    let mut value = -0.5 * (r as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * ld0 - 0.5 * ldk;
    if u > 0 {
        // Gamma^T (y - mu - Gamma eta x) = Gamma^T (y - mu) - eta x.
        let z = basis.gamma().transpose() * (y - &gp.mu) - &gp.eta * x;
        let solved = linalg::solve_spd(&gp.omega, &DMatrix::from_column_slice(u, 1, z.as_slice()), "Omega_k")?;
        value -= 0.5 * z.dot(&solved.column(0).into_owned());
    }
    if r - u > 0 {
        let w = basis.gamma0().transpose() * (y - &gp.mu);
        let solved = linalg::solve_spd(
            omega0,
            &DMatrix::from_column_slice(r - u, 1, w.as_slice()),
            "Omega0",
        )?;
        value -= 0.5 * w.dot(&solved.column(0).into_owned());
    }
    Ok(value)
}

/// All per-cluster log-densities for a dataset, as an n x M matrix.
/// Same quantity as [`log_density_k`] computed with shared factorizations.
pub fn log_density_matrix(data: &Dataset, theta: &MixtureParams) -> Result<DMatrix<f64>> {
    let (n, r, u, m) = (data.n(), theta.r(), theta.u(), theta.m());
    if data.r() != r {
        return Err(dim_err("log_density_matrix responses", r, data.r()));
    }
    if data.p() != theta.p() {
        return Err(dim_err("log_density_matrix predictors", theta.p(), data.p()));
    }
    let ld0 = linalg::sym_logdet(&theta.omega0, "Omega0")?;
    let omega0_inv = linalg::inv_spd(&theta.omega0, "Omega0")?;
    let y_gamma = data.y() * theta.basis.gamma(); // n x u
    let y_gamma0 = data.y() * theta.basis.gamma0(); // n x (r-u)
    let base = -0.5 * (r as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * ld0;

    let mut out = DMatrix::zeros(n, m);
    for k in 0..m {
        let gp = &theta.groups[k];
        let ldk = linalg::sym_logdet(&gp.omega, "Omega_k")?;
        let konst = base - 0.5 * ldk;
        // Material residuals: rows of Y Gamma - X eta^T - 1 (Gamma^T mu)^T.
        let mut quad1 = DVector::zeros(n);
        if u > 0 {
            let omega_inv = linalg::inv_spd(&gp.omega, "Omega_k")?;
            let mut res = &y_gamma - data.x() * gp.eta.transpose();
            let shift = theta.basis.gamma().transpose() * &gp.mu;
            for i in 0..n {
                for j in 0..u {
                    res[(i, j)] -= shift[j];
                }
            }
            let scaled = &res * &omega_inv;
            for i in 0..n {
                quad1[i] = res.row(i).dot(&scaled.row(i));
            }
        }
        let mut quad2 = DVector::zeros(n);
        if r - u > 0 {
            let mut res0 = y_gamma0.clone();
            let shift0 = theta.basis.gamma0().transpose() * &gp.mu;
            for i in 0..n {
                for j in 0..(r - u) {
                    res0[(i, j)] -= shift0[j];
                }
            }
            let scaled0 = &res0 * &omega0_inv;
            for i in 0..n {
                quad2[i] = res0.row(i).dot(&scaled0.row(i));
            }
        }
        for i in 0..n {
            out[(i, k)] = konst - 0.5 * quad1[i] - 0.5 * quad2[i];
        }
    }
    Ok(out)
}

/// log(sum(exp(v))) with the usual max shift.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Observed-data mixture log-likelihood:
/// sum_i log sum_k pi_k f_k(x_i, y_i), stabilized by log-sum-exp.
pub fn mixture_loglik(data: &Dataset, theta: &MixtureParams) -> Result<f64> {
    let dens = log_density_matrix(data, theta)?;
    let log_pi: Vec<f64> = theta.pi.iter().map(|&p| p.ln()).collect();
    let mut total = 0.0;
    let mut row = vec![0.0; theta.m()];
    for i in 0..data.n() {
        for k in 0..theta.m() {
            row[k] = log_pi[k] + dens[(i, k)];
        }
        total += log_sum_exp(&row);
    }
    Ok(total)
}
