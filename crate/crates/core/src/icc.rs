//! Stochastic fitting loop for the mixture envelope model.
//!
//! Each iteration draws cluster labels from their posterior (I-step), then
//! refreshes the parameter blocks on the pseudo-complete data: proportions
//! from label counts, everything else from a groupwise envelope fit
//! (CC-step). The label draw never settles pointwise, so convergence is
//! declared on the windowed mean of the observed-data log-likelihood, and
//! the reported estimate is the best post-burn-in iterate rather than the
//! last one.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::envelope::{fit_groupwise_envelope, min_group_size, OptimizerConfig};
use crate::error::{Error, Result};
use crate::model::{
    floor_proportions, log_density_matrix, mixture_loglik, Dataset, GroupParams, LabelVector,
    MixtureParams,
};
use crate::rng::{derive_seed, rng_from};

/// What to do when an imputation leaves a cluster with fewer than
/// min_group_size members.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyClusterPolicy {
    /// Move the observations with the highest responsibility for the starved
    /// cluster into it.
    Reassign,
    /// Re-seed the whole run with a fresh stream.
    Restart,
}

#[derive(Debug, Clone)]
pub struct IccConfig {
    pub max_iter: usize,
    pub burn_in: usize,
    /// Relative tolerance on the windowed-mean log-likelihood.
    pub loglik_tol: f64,
    pub window: usize,
    /// Independent chains started from different seeds; the one whose best
    /// iterate attains the highest log-likelihood is reported.
    pub n_starts: usize,
    pub seed: u64,
    pub empty_cluster_policy: EmptyClusterPolicy,
}

impl Default for IccConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            burn_in: 50,
            loglik_tol: 1e-4,
            window: 10,
            n_starts: 5,
            seed: 0,
            empty_cluster_policy: EmptyClusterPolicy::Reassign,
        }
    }
}

impl IccConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.max_iter {
            return Err(Error::InvalidArgument(format!(
                "burn_in ({}) must be below max_iter ({})",
                self.burn_in, self.max_iter
            )));
        }
        if self.loglik_tol <= 0.0 {
            return Err(Error::InvalidArgument("loglik_tol must be positive".into()));
        }
        if self.window == 0 {
            return Err(Error::InvalidArgument("window must be positive".into()));
        }
        Ok(())
    }

    fn optimizer(&self, chain_seed: u64, warm_start: Option<DMatrix<f64>>) -> OptimizerConfig {
        // A warm-started search only needs the deterministic eigenvector
        // starts on top of the previous basis; the full random multi-start
        // runs on the first CC-step of each chain.
        let n_starts = if warm_start.is_some() { 2 } else { 5 };
        OptimizerConfig {
            n_starts,
            seed: derive_seed(chain_seed, 0xcc),
            warm_start,
            ..OptimizerConfig::default()
        }
    }
}

/// Converged estimate plus diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: MixtureParams,
    /// Hard assignments argmax_k of the final responsibilities.
    pub labels: LabelVector,
    /// n x M posterior responsibilities at the reported theta.
    pub responsibilities: DMatrix<f64>,
    /// Observed-data log-likelihood after each iteration.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub seed_used: u64,
}

impl FitResult {
    /// Log-likelihood of the reported estimate.
    pub fn loglik(&self) -> f64 {
        self.loglik_trace
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Posterior cluster probabilities gamma_ik, computed in log space.
pub fn posterior_responsibilities(data: &Dataset, theta: &MixtureParams) -> Result<DMatrix<f64>> {
    let dens = log_density_matrix(data, theta)?;
    let m = theta.m();
    let log_pi: Vec<f64> = theta.pi.iter().map(|&p| p.ln()).collect();
    let mut gamma = DMatrix::zeros(data.n(), m);
    let mut row = vec![0.0; m];
    for i in 0..data.n() {
        for k in 0..m {
            row[k] = log_pi[k] + dens[(i, k)];
        }
        let lse = crate::model::log_sum_exp(&row);
        let mut total = 0.0;
        for k in 0..m {
            let v = (row[k] - lse).exp();
            gamma[(i, k)] = v;
            total += v;
        }
        for k in 0..m {
            gamma[(i, k)] /= total;
        }
    }
    Ok(gamma)
}

/// Draw one label per observation from Categorical(gamma_i1..gamma_iM).
/// Consumes exactly one uniform per row.
pub fn impute_labels(gamma: &DMatrix<f64>, rng: &mut impl Rng) -> LabelVector {
    let (n, m) = gamma.shape();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let draw: f64 = rng.gen();
        let mut cum = 0.0;
        let mut label = m;
        for k in 0..m {
            cum += gamma[(i, k)];
            if draw < cum {
                label = k + 1;
                break;
            }
        }
        labels.push(label);
    }
    LabelVector::new_unchecked(labels)
}

/// Cluster-size floor enforced by the empty-cluster policy. The contract
/// floor max(2, u+1) is not enough here: a cluster with fewer members than
/// predictors fits its regression exactly, its material covariance collapses
/// toward zero and the mixture likelihood grows without bound, which breaks
/// any likelihood-based model comparison. Clusters are therefore kept large
/// enough for the residual covariance to retain degrees of freedom, capped
/// at n/(2M) so small datasets stay feasible.
pub fn policy_group_floor(n: usize, m: usize, p: usize, r: usize, u: usize) -> usize {
    let df_floor = (p + r + 1).min((n / (2 * m)).max(1));
    min_group_size(u).max(df_floor)
}

/// Ensure every cluster has at least `min_size` members by pulling in the
/// observations scoring highest for each starved cluster. Scores are
/// responsibilities during the run and negative distances at initialization.
pub(crate) fn repair_labels(
    labels: &mut Vec<usize>,
    scores: &DMatrix<f64>,
    m: usize,
    min_size: usize,
) -> Result<()> {
    let n = labels.len();
    if n < m * min_size {
        return Err(Error::InvalidArgument(format!(
            "{n} observations cannot populate {m} clusters of size {min_size}"
        )));
    }
    for _pass in 0..(2 * m) {
        let mut counts = vec![0usize; m];
        for &l in labels.iter() {
            counts[l - 1] += 1;
        }
        let starved = match (0..m).find(|&k| counts[k] < min_size) {
            Some(k) => k,
            None => return Ok(()),
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores[(b, starved)]
                .partial_cmp(&scores[(a, starved)])
                .expect("NaN score")
        });
        let mut taken = counts[starved];
        for &i in &order {
            if taken >= min_size {
                break;
            }
            let current = labels[i] - 1;
            if current == starved {
                continue;
            }
            // Prefer donors whose cluster stays above the floor.
            if counts[current] <= min_size {
                continue;
            }
            counts[current] -= 1;
            counts[starved] += 1;
            labels[i] = starved + 1;
            taken += 1;
        }
        if taken < min_size {
            // All donors locked; take the top scorers unconditionally.
            for &i in &order {
                if taken >= min_size {
                    break;
                }
                let current = labels[i] - 1;
                if current == starved {
                    continue;
                }
                counts[current] -= 1;
                counts[starved] += 1;
                labels[i] = starved + 1;
                taken += 1;
            }
        }
    }
    let counts = LabelVector::new_unchecked(labels.clone()).counts(m);
    if counts.iter().any(|&c| c < min_size) {
        return Err(Error::EmptyGroup {
            group: counts.iter().position(|&c| c < min_size).unwrap() + 1,
            size: *counts.iter().min().unwrap(),
            min: min_size,
        });
    }
    Ok(())
}

/// Relative floor for material covariance eigenvalues across clusters
/// (Hathaway-style constraint). Imputed memberships can otherwise cherry-pick
/// a residual band and drive one cluster's Omega toward zero, the classic
/// unbounded direction of a location-scale mixture likelihood.
pub const OMEGA_RATIO_FLOOR: f64 = 1e-2;

fn constrain_omegas(groups: &mut [GroupParams]) {
    if groups.len() < 2 {
        return;
    }
    let mut top = 0.0f64;
    for g in groups.iter() {
        if g.omega.nrows() > 0 {
            let (vals, _) = crate::linalg::sym_eigen_desc(&g.omega);
            top = top.max(vals[0]);
        }
    }
    if top <= 0.0 {
        return;
    }
    let floor = OMEGA_RATIO_FLOOR * top;
    for g in groups.iter_mut() {
        if g.omega.nrows() == 0 {
            continue;
        }
        let (vals, vecs) = crate::linalg::sym_eigen_desc(&g.omega);
        if vals[vals.len() - 1] >= floor {
            continue;
        }
        let clipped = DMatrix::from_diagonal(&vals.map(|v| v.max(floor)));
        let mut omega = &vecs * clipped * vecs.transpose();
        crate::linalg::symmetrize(&mut omega);
        g.omega = omega;
    }
}

/// Proportions from label counts (pi-floored), remaining blocks from the
/// groupwise envelope fit. The stored group means are converted to
/// uncentered-predictor intercepts so the density mean is mu_k + beta_k x
/// at raw x.
pub fn cc_step(
    data: &Dataset,
    labels: &LabelVector,
    m: usize,
    u: usize,
    cfg: &OptimizerConfig,
) -> Result<MixtureParams> {
    let counts = labels.counts(m);
    let pi: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / data.n() as f64)
        .collect();
    cc_step_with_pi(data, labels, m, u, cfg, floor_proportions(&pi))
}

fn cc_step_with_pi(
    data: &Dataset,
    labels: &LabelVector,
    m: usize,
    u: usize,
    cfg: &OptimizerConfig,
    pi: Vec<f64>,
) -> Result<MixtureParams> {
    let fit = fit_groupwise_envelope(data, labels, m, u, cfg)?;
    let mut groups = (0..m)
        .map(|k| {
            GroupParams::new(
                fit.intercept(k),
                fit.groups[k].eta.clone(),
                fit.groups[k].omega.clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    constrain_omegas(&mut groups);
    MixtureParams::new(pi, groups, fit.basis, fit.omega0)
}

/// Furthest-point centroids on the response rows; labels by nearest centroid.
fn initial_labels(
    data: &Dataset,
    m: usize,
    min_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LabelVector> {
    let n = data.n();
    let mut centroid_rows = Vec::with_capacity(m);
    centroid_rows.push(rng.gen_range(0..n));
    let mut nearest = vec![f64::INFINITY; n];
    while centroid_rows.len() < m {
        let last = *centroid_rows.last().unwrap();
        for i in 0..n {
            let d = (data.y().row(i) - data.y().row(last)).norm_squared();
            nearest[i] = nearest[i].min(d);
        }
        let far = (0..n)
            .max_by(|&a, &b| nearest[a].partial_cmp(&nearest[b]).expect("NaN distance"))
            .unwrap();
        centroid_rows.push(far);
    }
    // Scores: negative squared distance to each centroid.
    let mut scores = DMatrix::zeros(n, m);
    for i in 0..n {
        for (k, &c) in centroid_rows.iter().enumerate() {
            scores[(i, k)] = -(data.y().row(i) - data.y().row(c)).norm_squared();
        }
    }
    let mut labels: Vec<usize> = (0..n)
        .map(|i| {
            (0..m)
                .max_by(|&a, &b| scores[(i, a)].partial_cmp(&scores[(i, b)]).unwrap())
                .unwrap()
                + 1
        })
        .collect();
    repair_labels(&mut labels, &scores, m, min_size)?;
    Ok(LabelVector::new_unchecked(labels))
}

/// Fit by the imputation/consistency loop.
///
/// `n_starts` independent chains run from derived seeds (a single chain when
/// M = 1, where the loop is deterministic); the chain whose best iterate
/// attains the highest observed-data log-likelihood is reported, ties broken
/// by chain order. Each chain seeds centroids on the responses, imputes
/// nearest-centroid labels and takes one CC-step with uniform proportions;
/// after `burn_in` iterations convergence is declared when the relative
/// change of the `window`-iteration mean log-likelihood drops below
/// `loglik_tol`; the chain's estimate is its best post-burn-in iterate.
pub fn run_icc(data: &Dataset, m: usize, u: usize, cfg: &IccConfig) -> Result<FitResult> {
    cfg.validate()?;
    if m == 0 {
        return Err(Error::InvalidArgument("M must be at least 1".into()));
    }
    if u > data.r() {
        return Err(Error::InvalidArgument(format!(
            "u={u} exceeds r={}",
            data.r()
        )));
    }
    let chains = if m == 1 { 1 } else { cfg.n_starts.max(1) };
    // Chains are independent; the reduction below is ordered by chain index,
    // so the parallel schedule cannot change the result.
    let results: Vec<Result<FitResult>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let chain_seed = if c == 0 {
                cfg.seed
            } else {
                derive_seed(cfg.seed, 0xc4a1 + c as u64)
            };
            run_chain(data, m, u, cfg, chain_seed)
        })
        .collect();
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for result in results {
        match result {
            Ok(fit) => {
                if best.as_ref().map_or(true, |b| fit.loglik() > b.loglik()) {
                    best = Some(fit);
                }
            }
            Err(err) => last_err = Some(err),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one chain ran"))
}

/// One chain, re-seeded on starvation failures (always under the Restart
/// policy; as a fallback when Reassign cannot populate every cluster).
fn run_chain(data: &Dataset, m: usize, u: usize, cfg: &IccConfig, seed: u64) -> Result<FitResult> {
    let mut last_err = None;
    for attempt in 0..5 {
        let attempt_seed = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, 0x7e57a7 + attempt as u64)
        };
        match run_icc_once(data, m, u, cfg, attempt_seed) {
            Ok(result) => return Ok(result),
            Err(err) => {
                let restart = matches!(err, Error::EmptyGroup { .. })
                    || cfg.empty_cluster_policy == EmptyClusterPolicy::Restart;
                last_err = Some(err);
                if !restart {
                    break;
                }
            }
        }
    }
    Err(last_err.unwrap())
}

fn run_icc_once(
    data: &Dataset,
    m: usize,
    u: usize,
    cfg: &IccConfig,
    seed: u64,
) -> Result<FitResult> {
    let min_size = policy_group_floor(data.n(), m, data.p(), data.r(), u);
    let mut rng = rng_from(seed);
    let labels = initial_labels(data, m, min_size, &mut rng)?;
    let uniform = vec![1.0 / m as f64; m];
    let mut theta = cc_step_with_pi(
        data,
        &labels,
        m,
        u,
        &cfg.optimizer(seed, None),
        floor_proportions(&uniform),
    )?;

    let grassmann_u = u >= 1 && u < data.r();
    let mut trace: Vec<f64> = Vec::with_capacity(cfg.max_iter);
    let mut best: Option<(MixtureParams, f64)> = None;
    let mut converged = false;
    let mut consecutive_failures = 0usize;

    for t in 1..=cfg.max_iter {
        let gamma = posterior_responsibilities(data, &theta)?;
        let mut drawn: Vec<usize> = impute_labels(&gamma, &mut rng).as_slice().to_vec();
        match cfg.empty_cluster_policy {
            EmptyClusterPolicy::Reassign => {
                repair_labels(&mut drawn, &gamma, m, min_size)?;
            }
            EmptyClusterPolicy::Restart => {
                let counts = LabelVector::new_unchecked(drawn.clone()).counts(m);
                if counts.iter().any(|&c| c < min_size) {
                    return Err(Error::EmptyGroup {
                        group: counts.iter().position(|&c| c < min_size).unwrap() + 1,
                        size: *counts.iter().min().unwrap(),
                        min: min_size,
                    });
                }
            }
        }
        let labels = LabelVector::new_unchecked(drawn);
        let warm = grassmann_u.then(|| theta.basis.gamma().clone());
        match cc_step(data, &labels, m, u, &cfg.optimizer(seed, warm)) {
            Ok(next) => {
                theta = next;
                consecutive_failures = 0;
            }
            Err(err) => {
                // Keep the previous estimate and redraw; give up if the
                // CC-step keeps failing.
                consecutive_failures += 1;
                if consecutive_failures > 20 {
                    return Err(err);
                }
            }
        }
        let ll = mixture_loglik(data, &theta)?;
        if !ll.is_finite() {
            return Err(Error::Singular("non-finite log-likelihood".into()));
        }
        trace.push(ll);
        if t > cfg.burn_in {
            let better = best.as_ref().map_or(true, |(_, bl)| ll > *bl);
            if better {
                best = Some((theta.clone(), ll));
            }
        }
        if t >= cfg.burn_in + 2 * cfg.window {
            let w = cfg.window;
            let recent: f64 = trace[t - w..t].iter().sum::<f64>() / w as f64;
            let previous: f64 = trace[t - 2 * w..t - w].iter().sum::<f64>() / w as f64;
            if (recent - previous).abs() <= cfg.loglik_tol * previous.abs().max(1.0) {
                converged = true;
                break;
            }
        }
    }

    let (theta_best, _) = best.expect("burn_in < max_iter guarantees an iterate");
    let responsibilities = posterior_responsibilities(data, &theta_best)?;
    let hard: Vec<usize> = (0..data.n())
        .map(|i| {
            (0..m)
                .max_by(|&a, &b| {
                    responsibilities[(i, a)]
                        .partial_cmp(&responsibilities[(i, b)])
                        .expect("NaN responsibility")
                })
                .unwrap()
                + 1
        })
        .collect();
    let iterations = trace.len();
    Ok(FitResult {
        theta: theta_best,
        labels: LabelVector::new_unchecked(hard),
        responsibilities,
        loglik_trace: trace,
        converged,
        iterations,
        seed_used: seed,
    })
}
