//! Measurement instruments: classification rates after label matching,
//! cross-validated prediction error, and bootstrap standard deviations of
//! the coefficient estimates.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::icc::{posterior_responsibilities, run_icc, FitResult, IccConfig};
use crate::model::{Dataset, LabelVector};
use crate::rng::{derive_seed, rng_from};

/// Classification quality after the best relabeling of the estimate.
#[derive(Debug, Clone)]
pub struct ClusterScore {
    /// Averaged share of wrongly included observations per cluster.
    pub fsr: f64,
    /// Averaged share of wrongly excluded observations per cluster.
    pub nsr: f64,
    /// permutation[k-1] is the true label matched to estimated label k.
    pub permutation: Vec<usize>,
    /// Set when an empty matched cluster forced a worst/neutral-case term.
    pub degenerate: bool,
}

/// Mixture labels are identified only up to permutation; find the relabeling
/// of the estimate minimizing total misassignments. Exhaustive for M <= 6,
/// assignment solver above.
pub fn match_labels(est: &LabelVector, truth: &LabelVector, m: usize) -> Vec<usize> {
    assert_eq!(est.len(), truth.len(), "label vectors must align");
    let mut confusion = vec![vec![0usize; m]; m];
    for (e, t) in est.iter().zip(truth.iter()) {
        confusion[e - 1][t - 1] += 1;
    }
    if m <= 6 {
        // Rank candidates by agreement; break ties by the resulting fsr and
        // nsr so scores stay invariant under relabelings of the estimate.
        let row_sums: Vec<usize> = confusion.iter().map(|row| row.iter().sum()).collect();
        let col_sums: Vec<usize> = (0..m).map(|t| confusion.iter().map(|row| row[t]).sum()).collect();
        let rates = |candidate: &[usize]| -> (f64, f64) {
            let mut fsr = 0.0;
            let mut nsr = 0.0;
            for e in 0..m {
                let t = candidate[e] - 1;
                let hit = confusion[e][t];
                fsr += if row_sums[e] == 0 {
                    1.0
                } else {
                    (row_sums[e] - hit) as f64 / row_sums[e] as f64
                };
                if col_sums[t] > 0 {
                    nsr += (col_sums[t] - hit) as f64 / col_sums[t] as f64;
                }
            }
            (fsr, nsr)
        };
        let mut best: Option<(usize, f64, f64, Vec<usize>)> = None;
        let mut perm: Vec<usize> = (1..=m).collect();
        permute(&mut perm, 0, &mut |candidate| {
            let agree: usize = (0..m).map(|k| confusion[k][candidate[k] - 1]).sum();
            let (fsr, nsr) = rates(candidate);
            let better = match &best {
                None => true,
                Some((ba, bf, bn, _)) => {
                    agree > *ba
                        || (agree == *ba && fsr < *bf - 1e-15)
                        || (agree == *ba && (fsr - *bf).abs() <= 1e-15 && nsr < *bn - 1e-15)
                }
            };
            if better {
                best = Some((agree, fsr, nsr, candidate.to_vec()));
            }
        });
        best.expect("nonempty permutation set").3
    } else {
        // Maximize agreement == minimize (max - agreement).
        let peak = confusion
            .iter()
            .flat_map(|row| row.iter())
            .cloned()
            .max()
            .unwrap_or(0) as f64;
        let cost =
            DMatrix::from_fn(m, m, |e, t| peak - confusion[e][t] as f64);
        hungarian(&cost).into_iter().map(|t| t + 1).collect()
    }
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Kuhn-Munkres assignment (minimization) via potentials; returns for each
/// row the assigned column.
fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j]: row assigned to column j (1-based rows)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// False and negative selection rates after label matching:
/// fsr = (1/M) sum_k |shat_k \ s_k| / |shat_k|,
/// nsr = (1/M) sum_k |s_k \ shat_k| / |s_k|.
/// An empty estimated cluster contributes the worst case 1 to its fsr term;
/// an empty true cluster contributes 0 to its nsr term. Both set the
/// `degenerate` flag.
pub fn fsr_nsr(est: &LabelVector, truth: &LabelVector, m: usize) -> ClusterScore {
    let permutation = match_labels(est, truth, m);
    let aligned: Vec<usize> = est.iter().map(|e| permutation[e - 1]).collect();
    let mut fsr = 0.0;
    let mut nsr = 0.0;
    let mut degenerate = false;
    for k in 1..=m {
        let shat: Vec<usize> = aligned
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == k).then_some(i))
            .collect();
        let s: Vec<usize> = truth
            .iter()
            .enumerate()
            .filter_map(|(i, l)| (l == k).then_some(i))
            .collect();
        let wrong_in = shat.iter().filter(|i| truth.get(**i) != k).count();
        let missed = s.iter().filter(|&&i| aligned[i] != k).count();
        if shat.is_empty() {
            fsr += 1.0;
            degenerate = true;
        } else {
            fsr += wrong_in as f64 / shat.len() as f64;
        }
        if s.is_empty() {
            degenerate = true;
        } else {
            nsr += missed as f64 / s.len() as f64;
        }
    }
    ClusterScore {
        fsr: fsr / m as f64,
        nsr: nsr / m as f64,
        permutation,
        degenerate,
    }
}

/// How held-out responses are predicted from a fitted mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionRule {
    /// Assign each held-out pair to its highest-responsibility cluster and
    /// predict with that cluster's regression.
    PosteriorAssign,
    /// Predict the prior-weighted mixture mean sum_k pi_k (mu_k + beta_k x),
    /// using the predictors alone.
    MixtureMean,
    /// Use the dataset's true labels (reference method for benchmarks).
    TrueLabels,
}

/// Cross-validated prediction error. Per-observation error is the Euclidean
/// norm of Y - Yhat (the identity inner product binding the residual).
#[derive(Debug, Clone)]
pub struct PredictionReport {
    pub mean_error: f64,
    pub sd_error: f64,
    pub folds: usize,
    pub repeats: usize,
    /// Mean error of every (repeat, fold) cell, repeat-major.
    pub per_fold: Vec<f64>,
    pub failed_folds: usize,
}

fn predict_errors(test: &Dataset, fit: &FitResult, rule: PredictionRule) -> Result<Vec<f64>> {
    let theta = &fit.theta;
    let m = theta.m();
    let betas: Vec<DMatrix<f64>> = (0..m).map(|k| theta.beta(k)).collect();
    let assign: Vec<usize> = match rule {
        PredictionRule::PosteriorAssign => {
            let gamma = posterior_responsibilities(test, theta)?;
            (0..test.n())
                .map(|i| {
                    (0..m)
                        .max_by(|&a, &b| {
                            gamma[(i, a)].partial_cmp(&gamma[(i, b)]).expect("NaN")
                        })
                        .unwrap()
                })
                .collect()
        }
        PredictionRule::TrueLabels => {
            let labels = test.true_labels().ok_or_else(|| {
                Error::InvalidArgument("TrueLabels prediction requires labels".into())
            })?;
            labels.iter().map(|l| l - 1).collect()
        }
        PredictionRule::MixtureMean => vec![0; test.n()],
    };
    let mut errors = Vec::with_capacity(test.n());
    for i in 0..test.n() {
        let x = test.x_row(i);
        let yhat: DVector<f64> = match rule {
            PredictionRule::MixtureMean => {
                let mut acc = DVector::zeros(test.r());
                for k in 0..m {
                    acc += (&theta.groups[k].mu + &betas[k] * &x) * theta.pi[k];
                }
                acc
            }
            _ => {
                let k = assign[i];
                &theta.groups[k].mu + &betas[k] * &x
            }
        };
        errors.push((test.y_row(i) - yhat).norm());
    }
    Ok(errors)
}

/// Generic CV driver: `fitter(train, seed)` produces the fit for one fold.
pub fn cv_prediction_error_with<F>(
    data: &Dataset,
    folds: usize,
    repeats: usize,
    seed: u64,
    rule: PredictionRule,
    fitter: F,
) -> Result<PredictionReport>
where
    F: Fn(&Dataset, u64) -> Result<FitResult> + Sync,
{
    let n = data.n();
    if folds < 2 || folds > n {
        return Err(Error::InvalidArgument(format!(
            "folds must lie in 2..=n, got {folds} with n={n}"
        )));
    }
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be positive".into()));
    }
    // Deterministic fold splits, then parallel fits.
    let mut tasks: Vec<(usize, usize, Vec<usize>, Vec<usize>)> = Vec::new();
    for rep in 0..repeats {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_from(derive_seed(seed, 0xf01d + rep as u64));
        order.shuffle(&mut rng);
        let base = n / folds;
        let extra = n % folds;
        let mut start = 0;
        for fold in 0..folds {
            let size = base + usize::from(fold < extra);
            let test_idx: Vec<usize> = order[start..start + size].to_vec();
            let train_idx: Vec<usize> = order[..start]
                .iter()
                .chain(order[start + size..].iter())
                .cloned()
                .collect();
            tasks.push((rep, fold, train_idx, test_idx));
            start += size;
        }
    }
    let results: Vec<(usize, Option<f64>)> = tasks
        .par_iter()
        .map(|(rep, fold, train_idx, test_idx)| {
            let cell = || -> Result<f64> {
                let train = data.subset(train_idx)?;
                let test = data.subset(test_idx)?;
                let fit = fitter(&train, derive_seed(seed, (rep * 8192 + fold) as u64))?;
                let errors = predict_errors(&test, &fit, rule)?;
                Ok(errors.iter().sum::<f64>() / errors.len() as f64)
            };
            (*rep, cell().ok())
        })
        .collect();

    let per_fold: Vec<f64> = results.iter().filter_map(|(_, e)| *e).collect();
    let failed_folds = results.len() - per_fold.len();
    if per_fold.is_empty() {
        return Err(Error::Singular("every CV fold failed".into()));
    }
    let mean_error = per_fold.iter().sum::<f64>() / per_fold.len() as f64;
    let sd_error = if repeats >= 2 {
        let rep_means: Vec<f64> = (0..repeats)
            .filter_map(|rep| {
                let vals: Vec<f64> = results
                    .iter()
                    .filter(|(r, e)| *r == rep && e.is_some())
                    .map(|(_, e)| e.unwrap())
                    .collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        sd(&rep_means)
    } else {
        sd(&per_fold)
    };
    Ok(PredictionReport {
        mean_error,
        sd_error,
        folds,
        repeats,
        per_fold,
        failed_folds,
    })
}

/// CV error of the mixture envelope fit itself.
pub fn cv_prediction_error(
    data: &Dataset,
    m: usize,
    u: usize,
    folds: usize,
    repeats: usize,
    cfg: &IccConfig,
) -> Result<PredictionReport> {
    cv_prediction_error_with(
        data,
        folds,
        repeats,
        cfg.seed,
        PredictionRule::PosteriorAssign,
        |train, seed| {
            run_icc(
                train,
                m,
                u,
                &IccConfig {
                    seed,
                    ..cfg.clone()
                },
            )
        },
    )
}

fn sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (values.len() - 1) as f64;
    var.sqrt()
}

/// Element-wise bootstrap standard deviations of the coefficient matrices.
#[derive(Debug, Clone)]
pub struct BootstrapReport {
    /// One r x p matrix of SDs per group, in full-data component order.
    pub per_element_sd: Vec<DMatrix<f64>>,
    pub replicates: usize,
    /// Mean of the r*p element SDs within each group.
    pub group_mean_sd: Vec<f64>,
    pub failed: usize,
}

/// Generic bootstrap driver. Every replicate is refit and its components are
/// aligned to the full-data fit by label matching on the resampled rows
/// before SDs are taken; unmatched label switching would otherwise inflate
/// the spread.
pub fn bootstrap_se_with<F>(
    data: &Dataset,
    m: usize,
    replicates: usize,
    seed: u64,
    fitter: F,
) -> Result<BootstrapReport>
where
    F: Fn(&Dataset, u64) -> Result<FitResult> + Sync,
{
    if replicates < 2 {
        return Err(Error::InvalidArgument("need at least 2 replicates".into()));
    }
    let n = data.n();
    let full = fitter(data, derive_seed(seed, 0xf0))?;
    let full_labels = full.labels.clone();

    let samples: Vec<Option<Vec<DMatrix<f64>>>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_from(derive_seed(seed, 0xb007 + b as u64));
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let cell = || -> Result<Vec<DMatrix<f64>>> {
                let boot = data.subset(&idx)?;
                let fit = fitter(&boot, derive_seed(seed, 0x5eed + b as u64))?;
                let reference = LabelVector::new_unchecked(
                    idx.iter().map(|&i| full_labels.get(i)).collect(),
                );
                let perm = match_labels(&fit.labels, &reference, m);
                let mut aligned: Vec<DMatrix<f64>> =
                    vec![DMatrix::zeros(data.r(), data.p()); m];
                for k in 0..m {
                    aligned[perm[k] - 1] = fit.theta.beta(k);
                }
                Ok(aligned)
            };
            cell().ok()
        })
        .collect();

    let kept: Vec<&Vec<DMatrix<f64>>> = samples.iter().flatten().collect();
    let failed = replicates - kept.len();
    if kept.len() < 2 {
        return Err(Error::Singular("too many bootstrap failures".into()));
    }
    let (r, p) = (data.r(), data.p());
    let mut per_element_sd = Vec::with_capacity(m);
    let mut group_mean_sd = Vec::with_capacity(m);
    for k in 0..m {
        let mut sds = DMatrix::zeros(r, p);
        for i in 0..r {
            for j in 0..p {
                let vals: Vec<f64> = kept.iter().map(|betas| betas[k][(i, j)]).collect();
                sds[(i, j)] = sd(&vals);
            }
        }
        group_mean_sd.push(sds.iter().sum::<f64>() / (r * p) as f64);
        per_element_sd.push(sds);
    }
    Ok(BootstrapReport {
        per_element_sd,
        replicates: kept.len(),
        group_mean_sd,
        failed,
    })
}

/// Bootstrap SDs for the mixture envelope fit.
pub fn bootstrap_se(
    data: &Dataset,
    m: usize,
    u: usize,
    replicates: usize,
    cfg: &IccConfig,
) -> Result<BootstrapReport> {
    bootstrap_se_with(data, m, replicates, cfg.seed, |d, seed| {
        run_icc(
            d,
            m,
            u,
            &IccConfig {
                seed,
                ..cfg.clone()
            },
        )
    })
}
