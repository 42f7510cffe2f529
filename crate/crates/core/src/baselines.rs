//! Comparison methods: the OLS mixture (the full-dimension degeneracy of the
//! envelope fit, run through the same imputation loop) and a two-stage
//! pipeline that clusters the responses alone (rank-based probit transform,
//! SVD scores, Gaussian-mixture EM) and only then fits the groupwise
//! envelope on the frozen labels.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::icc::policy_group_floor;
use crate::error::{Error, Result};
use crate::icc::{cc_step, repair_labels, run_icc, FitResult, IccConfig};
use crate::linalg;
use crate::model::{mixture_loglik, Dataset, LabelVector};
use crate::rng::{derive_seed, rng_from};

/// Options for the stage-1 clustering of the two-stage baseline.
#[derive(Debug, Clone)]
pub struct TwoStageConfig {
    /// Number of leading SVD score columns fed to the clustering.
    pub svd_components: usize,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
    pub seed: u64,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            svd_components: 3,
            gmm_max_iter: 500,
            gmm_tol: 1e-8,
            seed: 0,
        }
    }
}

/// The standard multivariate linear model inside the imputation loop:
/// dimension u = r, which reduces every CC-step to per-group least squares.
pub fn fit_ols_mixture(data: &Dataset, m: usize, cfg: &IccConfig) -> Result<FitResult> {
    run_icc(data, m, data.r(), cfg)
}

/// Rank-based normal-scores transform: value -> Phi^{-1}((rank - 0.5)/n),
/// applied independently per column.
pub fn probit_transform(scores: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = scores.shape();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = DMatrix::zeros(n, d);
    for j in 0..d {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores[(a, j)]
                .partial_cmp(&scores[(b, j)])
                .expect("NaN score")
        });
        for (rank, &i) in order.iter().enumerate() {
            out[(i, j)] = normal.inverse_cdf((rank as f64 + 0.5) / n as f64);
        }
    }
    out
}

/// Leading-d SVD scores of the column-centered responses. Directions whose
/// singular value falls below 1e-3 of the leading one are dropped: the rank
/// transform would inflate such numerically empty directions to unit scale
/// and hand the clustering pure noise.
pub fn svd_scores(y: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    let (n, r) = y.shape();
    if d == 0 || d > r {
        return Err(Error::InvalidArgument(format!(
            "svd_components must lie in 1..=r, got {d} with r={r}"
        )));
    }
    let mut yc = y.clone();
    let mean = y.row_mean();
    for i in 0..n {
        for j in 0..r {
            yc[(i, j)] -= mean[j];
        }
    }
    let svd = yc.clone().svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Singular("svd of responses".into()))?;
    let lead = svd.singular_values[0];
    let mut keep = 0usize;
    for j in 0..d.min(svd.singular_values.len()) {
        if svd.singular_values[j] > 1e-3 * lead {
            keep = j + 1;
        }
    }
    let keep = keep.max(1);
    // Scores on the leading right singular vectors: Yc v_j.
    let v = vt.rows(0, keep).transpose();
    Ok(&yc * v)
}

struct GmmFit {
    labels: Vec<usize>,
    responsibilities: DMatrix<f64>,
    converged: bool,
}

/// Full-covariance Gaussian-mixture EM on low-dimensional scores. A single
/// k-means-initialized run is used rather than best-of-restarts: the global
/// likelihood optimum of a mixture is often a degenerate tail/center split,
/// and the k-means basin is the one the reference clustering tools settle in.
/// Degenerate runs are retried on a fresh stream.
fn gmm_cluster(scores: &DMatrix<f64>, m: usize, ts: &TwoStageConfig) -> Result<GmmFit> {
    let mut last_err = None;
    for attempt in 0..10u64 {
        match gmm_cluster_once(scores, m, ts, derive_seed(ts.seed, attempt)) {
            Ok(fit) => return Ok(fit),
            Err(err) => last_err = Some(err),
        }
    }
    Err(last_err.unwrap())
}

fn gmm_cluster_once(
    scores: &DMatrix<f64>,
    m: usize,
    ts: &TwoStageConfig,
    seed: u64,
) -> Result<GmmFit> {
    let (n, d) = scores.shape();
    if n < m {
        return Err(Error::InvalidArgument("fewer observations than clusters".into()));
    }
    let mut rng = rng_from(seed);
    // Furthest-point seeding followed by a few Lloyd iterations.
    let mut rows: Vec<usize> = vec![rng.gen_range(0..n)];
    let mut nearest = vec![f64::INFINITY; n];
    while rows.len() < m {
        let last = *rows.last().unwrap();
        for i in 0..n {
            let dist = (scores.row(i) - scores.row(last)).norm_squared();
            nearest[i] = nearest[i].min(dist);
        }
        let far = (0..n)
            .max_by(|&a, &b| nearest[a].partial_cmp(&nearest[b]).expect("NaN"))
            .unwrap();
        rows.push(far);
    }
    let mut means: Vec<DVector<f64>> = rows
        .iter()
        .map(|&i| scores.row(i).transpose())
        .collect();
    let mut assign = vec![0usize; n];
    for _ in 0..20 {
        let mut changed = false;
        for i in 0..n {
            let xi = scores.row(i).transpose();
            let k = (0..m)
                .min_by(|&a, &b| {
                    (&xi - &means[a])
                        .norm_squared()
                        .partial_cmp(&(&xi - &means[b]).norm_squared())
                        .expect("NaN")
                })
                .unwrap();
            if assign[i] != k {
                assign[i] = k;
                changed = true;
            }
        }
        for k in 0..m {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == k).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = DVector::zeros(d);
            for &i in &members {
                mean += scores.row(i).transpose();
            }
            means[k] = mean / members.len() as f64;
        }
        if !changed {
            break;
        }
    }
    // Initial covariances and weights from the k-means partition.
    let grand = scores.row_mean().transpose();
    let mut pooled = DMatrix::zeros(d, d);
    for i in 0..n {
        let diff = scores.row(i).transpose() - &grand;
        pooled += &diff * diff.transpose();
    }
    pooled /= n as f64;
    let jitter = linalg::ridge_level(&pooled).max(1e-10);
    let mut covs: Vec<DMatrix<f64>> = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for k in 0..m {
        let members: Vec<usize> = (0..n).filter(|&i| assign[i] == k).collect();
        weights.push((members.len() as f64 / n as f64).max(1e-3));
        let mut cov = DMatrix::zeros(d, d);
        if members.len() > d {
            for &i in &members {
                let diff = scores.row(i).transpose() - &means[k];
                cov += &diff * diff.transpose();
            }
            cov /= members.len() as f64;
        } else {
            cov = pooled.clone();
        }
        for i in 0..d {
            cov[(i, i)] += jitter;
        }
        covs.push(cov);
    }
    let wsum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= wsum);

    let mut gamma = DMatrix::zeros(n, m);
    let mut last_ll = f64::NEG_INFINITY;
    let mut converged = false;
    for _ in 0..ts.gmm_max_iter {
        // E-step in log space.
        let mut ll = 0.0;
        for i in 0..n {
            let xi = scores.row(i).transpose();
            let mut logs = vec![0.0; m];
            for k in 0..m {
                logs[k] = weights[k].max(1e-300).ln()
                    + linalg::mvn_logpdf(&xi, &means[k], &covs[k])
                        .map_err(|_| Error::Singular("gmm covariance".into()))?;
            }
            let lse = crate::model::log_sum_exp(&logs);
            ll += lse;
            for k in 0..m {
                gamma[(i, k)] = (logs[k] - lse).exp();
            }
        }
        // M-step.
        for k in 0..m {
            let nk: f64 = (0..n).map(|i| gamma[(i, k)]).sum();
            if nk < 1e-8 {
                return Err(Error::Singular("gmm component collapsed".into()));
            }
            weights[k] = nk / n as f64;
            let mut mean = DVector::zeros(d);
            for i in 0..n {
                mean += scores.row(i).transpose() * gamma[(i, k)];
            }
            mean /= nk;
            let mut cov = DMatrix::zeros(d, d);
            for i in 0..n {
                let diff = scores.row(i).transpose() - &mean;
                cov += &diff * diff.transpose() * gamma[(i, k)];
            }
            cov /= nk;
            linalg::symmetrize(&mut cov);
            for i in 0..d {
                cov[(i, i)] += jitter;
            }
            means[k] = mean;
            covs[k] = cov;
        }
        if (ll - last_ll).abs() <= ts.gmm_tol * ll.abs().max(1.0) {
            converged = true;
            break;
        }
        last_ll = ll;
    }
    let labels: Vec<usize> = (0..n)
        .map(|i| {
            (0..m)
                .max_by(|&a, &b| gamma[(i, a)].partial_cmp(&gamma[(i, b)]).expect("NaN"))
                .unwrap()
                + 1
        })
        .collect();
    Ok(GmmFit {
        labels,
        responsibilities: gamma,
        converged,
    })
}

/// Two-stage baseline: cluster the responses alone (probit normal-scores
/// transform of the response columns -> SVD scores -> Gaussian-mixture EM),
/// then fit the groupwise envelope at dimension u on the frozen stage-1
/// labels. The labels never see the predictors, which is precisely the
/// weakness this baseline demonstrates.
///
/// The transform precedes the SVD: rank-transforming the scores themselves
/// would map any score column onto the same normal quantile grid and erase
/// the cluster separation the scores carry.
pub fn two_stage_fit(
    data: &Dataset,
    m: usize,
    u: usize,
    ts: &TwoStageConfig,
    cfg: &IccConfig,
) -> Result<FitResult> {
    let d = ts.svd_components.min(data.r());
    let transformed = probit_transform(data.y());
    let scores = svd_scores(&transformed, d)?;
    let gmm = gmm_cluster(&scores, m, ts)?;

    let mut labels = gmm.labels;
    let floor = policy_group_floor(data.n(), m, data.p(), data.r(), u);
    repair_labels(&mut labels, &gmm.responsibilities, m, floor)?;
    let labels = LabelVector::new(labels, m)?;

    let opt = crate::envelope::OptimizerConfig {
        n_starts: cfg.n_starts,
        seed: derive_seed(cfg.seed, 0x25),
        ..Default::default()
    };
    let theta = cc_step(data, &labels, m, u, &opt)?;
    let ll = mixture_loglik(data, &theta)?;
    // Labels are fixed after stage 1; report them as hard assignments.
    let mut responsibilities = DMatrix::zeros(data.n(), m);
    for (i, l) in labels.iter().enumerate() {
        responsibilities[(i, l - 1)] = 1.0;
    }
    Ok(FitResult {
        theta,
        labels,
        responsibilities,
        loglik_trace: vec![ll],
        converged: gmm.converged,
        iterations: 1,
        seed_used: ts.seed,
    })
}

/// Which fitting procedure to run on a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Mixture envelope via the imputation loop.
    Icc,
    /// OLS mixture (u = r) via the same loop.
    Ols,
    /// Two-stage response clustering + envelope fit.
    TwoStage,
    /// Groupwise envelope on the dataset's true labels (reference).
    TrueLabels,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Icc => "icc",
            Method::Ols => "ols",
            Method::TwoStage => "two-stage",
            Method::TrueLabels => "true",
        }
    }
}

/// Dispatch a fit by method, with a per-call seed override.
pub fn fit_method(
    data: &Dataset,
    method: Method,
    m: usize,
    u: usize,
    cfg: &IccConfig,
    ts: &TwoStageConfig,
) -> Result<FitResult> {
    match method {
        Method::Icc => run_icc(data, m, u, cfg),
        Method::Ols => fit_ols_mixture(data, m, cfg),
        Method::TwoStage => {
            let ts_seeded = TwoStageConfig {
                seed: derive_seed(cfg.seed, 0x7a0),
                ..ts.clone()
            };
            two_stage_fit(data, m, u, &ts_seeded, cfg)
        }
        Method::TrueLabels => {
            let labels = data
                .true_labels()
                .ok_or_else(|| {
                    Error::InvalidArgument("true-label fit requires labels".into())
                })?
                .clone();
            let opt = crate::envelope::OptimizerConfig {
                n_starts: cfg.n_starts,
                seed: derive_seed(cfg.seed, 0x7e),
                ..Default::default()
            };
            let theta = cc_step(data, &labels, m, u, &opt)?;
            let ll = mixture_loglik(data, &theta)?;
            let responsibilities = crate::icc::posterior_responsibilities(data, &theta)?;
            Ok(FitResult {
                theta,
                labels,
                responsibilities,
                loglik_trace: vec![ll],
                converged: true,
                iterations: 1,
                seed_used: cfg.seed,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::fsr_nsr;
    use rand::seq::SliceRandom;
    use rand_distr::StandardNormal;

    #[test]
    fn ols_mixture_delegates_to_full_dimension_run() {
        let mut rng = rng_from(3);
        let x = DMatrix::from_fn(40, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(40, 3, |i, _| {
            rng.sample::<f64, _>(StandardNormal) + if i % 2 == 0 { 3.0 } else { -3.0 }
        });
        let data = Dataset::new(x, y, None).unwrap();
        let cfg = IccConfig {
            max_iter: 30,
            burn_in: 5,
            ..IccConfig::with_seed(11)
        };
        let a = fit_ols_mixture(&data, 2, &cfg).unwrap();
        let b = run_icc(&data, 2, 3, &cfg).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.loglik_trace, b.loglik_trace);
        assert_eq!(a.theta.basis.gamma(), b.theta.basis.gamma());
        assert_eq!(a.theta.pi, b.theta.pi);
    }

    #[test]
    fn probit_transform_is_monotone_and_standardized() {
        let mut rng = rng_from(9);
        let raw = DMatrix::from_fn(200, 2, |_, _| rng.sample::<f64, _>(StandardNormal) * 7.0);
        let z = probit_transform(&raw);
        // Monotone within each column.
        for j in 0..2 {
            for a in 0..200 {
                for b in 0..200 {
                    if raw[(a, j)] < raw[(b, j)] {
                        assert!(z[(a, j)] < z[(b, j)]);
                    }
                }
            }
        }
        // Mean approximately zero by symmetry of the grid.
        let mean = z.column(0).mean();
        assert!(mean.abs() < 1e-10);
    }

    #[test]
    fn two_stage_separable_clusters_exact() {
        let mut rng = rng_from(17);
        let n = 60;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(n, 3, |i, _| {
            let center = if i < 30 { 10.0 } else { -10.0 };
            center + 0.01 * rng.sample::<f64, _>(StandardNormal)
        });
        let labels: Vec<usize> = (0..n).map(|i| if i < 30 { 1 } else { 2 }).collect();
        let data = Dataset::new(x, y, Some(LabelVector::new(labels, 2).unwrap())).unwrap();
        let fit = two_stage_fit(
            &data,
            2,
            1,
            &TwoStageConfig::default(),
            &IccConfig::with_seed(5),
        )
        .unwrap();
        let score = fsr_nsr(&fit.labels, data.true_labels().unwrap(), 2);
        assert_eq!(score.fsr, 0.0);
        assert_eq!(score.nsr, 0.0);
    }

    #[test]
    fn two_stage_labels_ignore_predictors() {
        let mut rng = rng_from(23);
        let n = 50;
        let x = DMatrix::from_fn(n, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(n, 3, |i, _| {
            rng.sample::<f64, _>(StandardNormal) + if i % 2 == 0 { 4.0 } else { -4.0 }
        });
        let data = Dataset::new(x.clone(), y.clone(), None).unwrap();
        let ts = TwoStageConfig::default();
        let cfg = IccConfig::with_seed(7);
        let fit_a = two_stage_fit(&data, 2, 1, &ts, &cfg).unwrap();

        // Permute the predictor rows while keeping Y fixed.
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(1000));
        let x_perm = DMatrix::from_fn(n, 3, |i, j| x[(order[i], j)]);
        let data_perm = Dataset::new(x_perm, y, None).unwrap();
        let fit_b = two_stage_fit(&data_perm, 2, 1, &ts, &cfg).unwrap();
        assert_eq!(fit_a.labels, fit_b.labels);
    }

    #[test]
    fn svd_scores_dimension_checks() {
        let y = DMatrix::<f64>::identity(5, 3);
        assert!(svd_scores(&y, 0).is_err());
        assert!(svd_scores(&y, 4).is_err());
        assert_eq!(svd_scores(&y, 2).unwrap().shape(), (5, 2));
    }
}
