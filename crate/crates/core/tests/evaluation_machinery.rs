//! Consistency checks of the fold and bootstrap machinery.

use envmix::baselines::{fit_method, Method, TwoStageConfig};
use envmix::evaluation::{
    bootstrap_se_with, cv_prediction_error, cv_prediction_error_with, PredictionRule,
};
use envmix::icc::{run_icc, FitResult, IccConfig};
use envmix::model::Dataset;
use envmix::simgen::{generate_scenario, ScenarioConfig};
use nalgebra::DMatrix;

fn small_scenario(n: usize, seed: u64) -> envmix::simgen::SimDataset {
    let mut cfg = ScenarioConfig::new(2, n, seed);
    cfg.r = 3;
    cfg.p = 2;
    generate_scenario(&cfg).unwrap()
}

/// A fitter that ignores the training data and returns a fixed estimate, so
/// fold mechanics can be isolated from fitting noise.
fn fixed_fitter(data: &Dataset) -> impl Fn(&Dataset, u64) -> envmix::Result<FitResult> + Sync + '_ {
    let cfg = IccConfig {
        max_iter: 20,
        burn_in: 5,
        ..IccConfig::with_seed(3)
    };
    let fit = run_icc(data, 2, 1, &cfg).unwrap();
    move |_train, _seed| Ok(fit.clone())
}

#[test]
fn leave_one_out_equals_mean_of_single_holdouts() {
    let sim = small_scenario(24, 5);
    let data = &sim.data;
    let fitter = fixed_fitter(data);
    let loo = cv_prediction_error_with(
        data,
        data.n(),
        1,
        77,
        PredictionRule::PosteriorAssign,
        &fitter,
    )
    .unwrap();
    assert_eq!(loo.per_fold.len(), data.n());
    let mean = loo.per_fold.iter().sum::<f64>() / loo.per_fold.len() as f64;
    assert!((loo.mean_error - mean).abs() < 1e-12);

    // Each single-holdout error computed directly with the same fixed fit.
    let fit = fitter(data, 0).unwrap();
    let mut direct: Vec<f64> = Vec::new();
    for i in 0..data.n() {
        let test = data.subset(&[i]).unwrap();
        let gamma = envmix::icc::posterior_responsibilities(&test, &fit.theta).unwrap();
        let k = if gamma[(0, 0)] >= gamma[(0, 1)] { 0 } else { 1 };
        let yhat = &fit.theta.groups[k].mu + fit.theta.beta(k) * test.x_row(0);
        direct.push((test.y_row(0) - yhat).norm());
    }
    let direct_mean = direct.iter().sum::<f64>() / direct.len() as f64;
    assert!((loo.mean_error - direct_mean).abs() < 1e-10);
}

#[test]
fn noiseless_linear_data_has_vanishing_cv_error() {
    // M=1, u=r, exact linear relation: held-out error ~ 0.
    let n = 60;
    let x = DMatrix::from_fn(n, 2, |i, j| ((i + j) as f64 * 0.37).sin());
    let b = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 2.0, 0.3]);
    let y = &x * &b;
    let data = Dataset::new(x, y, None).unwrap();
    let report = cv_prediction_error(&data, 1, 2, 5, 2, &IccConfig::with_seed(1)).unwrap();
    assert!(report.mean_error < 1e-8, "error {}", report.mean_error);
    assert_eq!(report.failed_folds, 0);
}

#[test]
fn mixture_mean_rule_runs_and_differs_from_posterior() {
    let sim = small_scenario(80, 6);
    let fitter = |train: &Dataset, seed: u64| {
        run_icc(
            train,
            2,
            1,
            &IccConfig {
                max_iter: 30,
                burn_in: 10,
                ..IccConfig::with_seed(seed)
            },
        )
    };
    let post = cv_prediction_error_with(&sim.data, 4, 1, 9, PredictionRule::PosteriorAssign, fitter)
        .unwrap();
    let mix = cv_prediction_error_with(&sim.data, 4, 1, 9, PredictionRule::MixtureMean, fitter)
        .unwrap();
    assert!(post.mean_error > 0.0 && mix.mean_error > 0.0);
    // The mixture-mean rule cannot beat per-cluster assignment on separated
    // clusters.
    assert!(mix.mean_error >= post.mean_error);
}

#[test]
fn bootstrap_zero_noise_sds_vanish() {
    let n = 40;
    let x = DMatrix::from_fn(n, 2, |i, j| ((i * 2 + 3 * j) as f64 * 0.21).cos());
    let b = DMatrix::from_row_slice(2, 2, &[0.7, -1.2, 0.4, 2.0]);
    let y = &x * &b;
    let data = Dataset::new(x, y, None).unwrap();
    let report = bootstrap_se_with(&data, 1, 10, 4, |d, seed| {
        run_icc(
            d,
            1,
            2,
            &IccConfig {
                max_iter: 10,
                burn_in: 2,
                ..IccConfig::with_seed(seed)
            },
        )
    })
    .unwrap();
    assert!(report.group_mean_sd[0] < 1e-8, "sd {}", report.group_mean_sd[0]);
}

#[test]
fn bootstrap_sd_stabilizes_as_replicates_double() {
    let sim = small_scenario(150, 12);
    let fitter = |d: &Dataset, seed: u64| {
        fit_method(
            d,
            Method::Ols,
            2,
            1,
            &IccConfig {
                max_iter: 25,
                burn_in: 8,
                n_starts: 2,
                ..IccConfig::with_seed(seed)
            },
            &TwoStageConfig::default(),
        )
    };
    let b50 = bootstrap_se_with(&sim.data, 2, 50, 31, fitter).unwrap();
    let b100 = bootstrap_se_with(&sim.data, 2, 100, 31, fitter).unwrap();
    let a = b50.per_element_sd[0][(0, 0)];
    let b = b100.per_element_sd[0][(0, 0)];
    let rel = (a - b).abs() / a.abs().max(1e-12);
    assert!(rel <= 0.2, "element SD unstable: {a} vs {b} (rel {rel})");
}
