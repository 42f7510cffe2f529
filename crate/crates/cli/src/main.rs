mod error;
mod io;
mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use envmix::baselines::{fit_method, Method, TwoStageConfig};
use envmix::evaluation::{
    bootstrap_se_with, cv_prediction_error_with, fsr_nsr, PredictionRule,
};
use envmix::icc::{EmptyClusterPolicy, FitResult, IccConfig};
use envmix::model::Dataset;
use envmix::rng::derive_seed;
use envmix::selection::{select_model, SelectionConfig};
use envmix::simgen::{generate_scenario, ScenarioConfig};

use error::{CliError, CliResult};
use io::{FitJson, SelectionJson, ThetaJson};
use manifest::RunManifest;

/// Mixture envelope regression toolkit: simulate benchmark scenarios, fit
/// mixture envelope models to CSV data, select (M, u) by BIC, and benchmark
/// against OLS-mixture and two-stage clustering baselines.
#[derive(Parser)]
#[command(name = "envmix", version, about)]
struct CliArgs {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario (X.csv, Y.csv, labels.csv, truth.json).
    Simulate(SimulateArgs),
    /// Fit one model to X/Y data and write fit.json.
    Fit(FitArgs),
    /// Score a (M, u) grid by BIC and write selection.json.
    Select(SelectArgs),
    /// Classification rates, CV prediction error and bootstrap SDs for one
    /// method; writes eval.json.
    Evaluate(EvaluateArgs),
    /// Run all methods over replicate datasets; writes a benchmark table and
    /// bootstrap SD curves.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Icc,
    Ols,
    TwoStage,
}

impl MethodArg {
    fn to_method(self) -> Method {
        match self {
            MethodArg::Icc => Method::Icc,
            MethodArg::Ols => Method::Ols,
            MethodArg::TwoStage => Method::TwoStage,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RuleArg {
    /// Assign held-out pairs to their highest-responsibility cluster.
    Posterior,
    /// Predict with the prior-weighted mixture mean (predictors only).
    MixtureMean,
}

impl RuleArg {
    fn to_rule(self) -> PredictionRule {
        match self {
            RuleArg::Posterior => PredictionRule::PosteriorAssign,
            RuleArg::MixtureMean => PredictionRule::MixtureMean,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Reassign,
    Restart,
}

/// Loop options shared by every fitting command.
#[derive(Args, Clone)]
struct LoopOpts {
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 50)]
    burn_in: usize,
    #[arg(long, default_value_t = 1e-4)]
    loglik_tol: f64,
    #[arg(long, default_value_t = 10)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    n_starts: usize,
    #[arg(long, value_enum, default_value_t = PolicyArg::Reassign)]
    empty_cluster_policy: PolicyArg,
    /// Leading SVD score dimensions for the two-stage baseline.
    #[arg(long, default_value_t = 3)]
    svd_components: usize,
}

impl LoopOpts {
    fn icc(&self, seed: u64) -> IccConfig {
        IccConfig {
            max_iter: self.max_iter,
            burn_in: self.burn_in,
            loglik_tol: self.loglik_tol,
            window: self.window,
            n_starts: self.n_starts,
            seed,
            empty_cluster_policy: match self.empty_cluster_policy {
                PolicyArg::Reassign => EmptyClusterPolicy::Reassign,
                PolicyArg::Restart => EmptyClusterPolicy::Restart,
            },
        }
    }

    fn two_stage(&self, seed: u64) -> TwoStageConfig {
        TwoStageConfig {
            svd_components: self.svd_components,
            seed,
            ..TwoStageConfig::default()
        }
    }

    fn record(&self, manifest: RunManifest) -> RunManifest {
        manifest
            .opt("max_iter", self.max_iter)
            .opt("burn_in", self.burn_in)
            .opt("loglik_tol", self.loglik_tol)
            .opt("window", self.window)
            .opt("n_starts", self.n_starts)
            .opt("svd_components", self.svd_components)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    r: usize,
    #[arg(long, default_value_t = 20)]
    p: usize,
    #[arg(long, default_value_t = 1)]
    u: usize,
    /// Group proportions; defaults to 0.4,0.6 for two groups, uniform above.
    #[arg(long, value_delimiter = ',')]
    proportions: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for X.csv, Y.csv, labels.csv, truth.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    m: usize,
    /// Envelope dimension; ignored by --method ols (which uses u = r).
    #[arg(long, default_value_t = 1)]
    u: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Icc)]
    method: MethodArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: LoopOpts,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    m_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    u_grid: Vec<usize>,
    /// Count the M-1 free mixing proportions in the BIC penalty.
    #[arg(long, default_value_t = false)]
    count_pi: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-cell fit artifacts into this directory.
    #[arg(long)]
    emit_fits: Option<PathBuf>,
    #[command(flatten)]
    opts: LoopOpts,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    /// True labels (enables the classification rates).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    u: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Icc)]
    method: MethodArg,
    /// CV folds; 0 skips cross-validation.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Bootstrap replicates; 0 skips the bootstrap.
    #[arg(long, default_value_t = 50)]
    bootstrap: usize,
    #[arg(long, value_enum, default_value_t = RuleArg::Posterior)]
    prediction_rule: RuleArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: LoopOpts,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, value_delimiter = ',', default_value = "300")]
    n_grid: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    r: usize,
    #[arg(long, default_value_t = 20)]
    p: usize,
    #[arg(long, default_value_t = 1)]
    u: usize,
    /// Replicate datasets per sample size.
    #[arg(long, default_value_t = 3)]
    replicates: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Bootstrap replicates for the SD curves; 0 skips them.
    #[arg(long, default_value_t = 20)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for table.csv, bootstrap_curves.csv, bench.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: LoopOpts,
}

fn main() {
    init_thread_cap();
    let cli = CliArgs::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Select(args) => cmd_select(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Bench(args) => cmd_bench(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code);
    }
}

/// ENVMIX_THREADS caps the worker pool.
fn init_thread_cap() {
    if let Ok(raw) = std::env::var("ENVMIX_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_simulate(args: SimulateArgs) -> CliResult<()> {
    let mut cfg = ScenarioConfig::new(args.m, args.n, args.seed);
    cfg.r = args.r;
    cfg.p = args.p;
    cfg.u = args.u;
    if let Some(props) = &args.proportions {
        cfg.proportions = props.clone();
    }
    let sim = generate_scenario(&cfg).map_err(CliError::from_core)?;
    ensure_dir(&args.out)?;

    io::write_matrix_csv(&args.out.join("X.csv"), sim.data.x(), "x")?;
    io::write_matrix_csv(&args.out.join("Y.csv"), sim.data.y(), "y")?;
    io::write_labels_csv(&args.out.join("labels.csv"), sim.data.true_labels().unwrap())?;

    let manifest = RunManifest::new("simulate")
        .output(&args.out.display().to_string())
        .opt("m", args.m)
        .opt("n", args.n)
        .opt("r", args.r)
        .opt("p", args.p)
        .opt("u", args.u)
        .opt("proportions", cfg.proportions.clone())
        .opt("seed", args.seed);

    #[derive(Serialize)]
    struct TruthJson {
        manifest: RunManifest,
        m: usize,
        n: usize,
        r: usize,
        p: usize,
        u: usize,
        proportions: Vec<f64>,
        seed: u64,
        params: ThetaJson,
    }
    io::write_json(
        &args.out.join("truth.json"),
        &TruthJson {
            manifest,
            m: args.m,
            n: args.n,
            r: args.r,
            p: args.p,
            u: args.u,
            proportions: cfg.proportions.clone(),
            seed: args.seed,
            params: ThetaJson::from_params(&sim.truth),
        },
    )?;
    Ok(())
}

fn run_method(
    data: &Dataset,
    method: Method,
    m: usize,
    u: usize,
    seed: u64,
    opts: &LoopOpts,
) -> CliResult<FitResult> {
    let u_eff = if method == Method::Ols { data.r() } else { u };
    if u_eff > data.r() {
        return Err(CliError::data(format!(
            "u={u_eff} exceeds the number of responses r={}",
            data.r()
        )));
    }
    fit_method(
        data,
        method,
        m,
        u_eff,
        &opts.icc(seed),
        &opts.two_stage(derive_seed(seed, 0x75)),
    )
    .map_err(CliError::from_core)
}

fn cmd_fit(args: FitArgs) -> CliResult<()> {
    let data = io::load_dataset(&args.x, &args.y, None)?;
    if args.m == 0 || args.m > data.n() {
        return Err(CliError::data(format!("invalid cluster count M={}", args.m)));
    }
    let method = args.method.to_method();
    let fit = run_method(&data, method, args.m, args.u, args.seed, &args.opts)?;
    let u_eff = if method == Method::Ols { data.r() } else { args.u };
    let manifest = args.opts.record(
        RunManifest::new("fit")
            .input("x", &args.x.display().to_string())
            .input("y", &args.y.display().to_string())
            .output(&args.out.display().to_string())
            .opt("m", args.m)
            .opt("u", u_eff)
            .opt("method", method.name())
            .opt("seed", args.seed),
    );
    io::write_json(&args.out, &FitJson::new(manifest, method.name(), args.m, u_eff, &fit))
}

fn cmd_select(args: SelectArgs) -> CliResult<()> {
    let data = io::load_dataset(&args.x, &args.y, None)?;
    let cfg = SelectionConfig {
        icc: args.opts.icc(args.seed),
        count_pi: args.count_pi,
        keep_fits: args.emit_fits.is_some(),
    };
    let report =
        select_model(&data, &args.m_grid, &args.u_grid, &cfg).map_err(CliError::from_core)?;
    let manifest = args.opts.record(
        RunManifest::new("select")
            .input("x", &args.x.display().to_string())
            .input("y", &args.y.display().to_string())
            .output(&args.out.display().to_string())
            .opt("m_grid", args.m_grid.clone())
            .opt("u_grid", args.u_grid.clone())
            .opt("count_pi", args.count_pi)
            .opt("seed", args.seed),
    );
    if let Some(dir) = &args.emit_fits {
        ensure_dir(dir)?;
        for cell in &report.grid {
            if let Some(fit) = &cell.fit {
                let cell_manifest = manifest.clone();
                let path = dir.join(format!("fit_m{}_u{}.json", cell.m, cell.u));
                io::write_json(
                    &path,
                    &FitJson::new(cell_manifest, "icc", cell.m, cell.u, fit),
                )?;
            }
        }
    }
    io::write_json(&args.out, &SelectionJson::new(manifest, &report))
}

#[derive(Serialize)]
struct ClusterScoreJson {
    fsr: f64,
    nsr: f64,
    permutation: Vec<usize>,
    degenerate: bool,
}

#[derive(Serialize)]
struct PredictionJson {
    mean_error: f64,
    sd_error: f64,
    folds: usize,
    repeats: usize,
    per_fold: Vec<f64>,
    failed_folds: usize,
}

#[derive(Serialize)]
struct BootstrapJson {
    replicates: usize,
    failed: usize,
    group_mean_sd: Vec<f64>,
    per_element_sd: Vec<Vec<Vec<f64>>>,
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult<()> {
    let labels = match &args.labels {
        Some(path) => Some((path.as_path(), args.m)),
        None => None,
    };
    let data = io::load_dataset(&args.x, &args.y, labels)?;
    let method = args.method.to_method();

    let cluster_score = match data.true_labels() {
        Some(truth) => {
            let fit = run_method(&data, method, args.m, args.u, args.seed, &args.opts)?;
            let score = fsr_nsr(&fit.labels, truth, args.m);
            Some(ClusterScoreJson {
                fsr: score.fsr,
                nsr: score.nsr,
                permutation: score.permutation,
                degenerate: score.degenerate,
            })
        }
        None => None,
    };

    let prediction = if args.folds >= 2 {
        let report = cv_prediction_error_with(
            &data,
            args.folds,
            args.repeats,
            derive_seed(args.seed, 0xc0),
            args.prediction_rule.to_rule(),
            |train, seed| {
                run_method(train, method, args.m, args.u, seed, &args.opts)
                    .map_err(|e| envmix::Error::InvalidArgument(e.message))
            },
        )
        .map_err(CliError::from_core)?;
        Some(PredictionJson {
            mean_error: report.mean_error,
            sd_error: report.sd_error,
            folds: report.folds,
            repeats: report.repeats,
            per_fold: report.per_fold,
            failed_folds: report.failed_folds,
        })
    } else {
        None
    };

    let bootstrap = if args.bootstrap >= 2 {
        let report = bootstrap_se_with(
            &data,
            args.m,
            args.bootstrap,
            derive_seed(args.seed, 0xb0),
            |d, seed| {
                run_method(d, method, args.m, args.u, seed, &args.opts)
                    .map_err(|e| envmix::Error::InvalidArgument(e.message))
            },
        )
        .map_err(CliError::from_core)?;
        Some(BootstrapJson {
            replicates: report.replicates,
            failed: report.failed,
            group_mean_sd: report.group_mean_sd,
            per_element_sd: report.per_element_sd.iter().map(io::matrix_rows).collect(),
        })
    } else {
        None
    };

    let manifest = args.opts.record(
        RunManifest::new("evaluate")
            .input("x", &args.x.display().to_string())
            .input("y", &args.y.display().to_string())
            .output(&args.out.display().to_string())
            .opt("m", args.m)
            .opt("u", args.u)
            .opt("method", method.name())
            .opt("folds", args.folds)
            .opt("repeats", args.repeats)
            .opt("bootstrap", args.bootstrap)
            .opt("seed", args.seed),
    );

    #[derive(Serialize)]
    struct EvalJson {
        manifest: RunManifest,
        method: String,
        m: usize,
        u: usize,
        cluster_score: Option<ClusterScoreJson>,
        prediction: Option<PredictionJson>,
        bootstrap: Option<BootstrapJson>,
    }
    io::write_json(
        &args.out,
        &EvalJson {
            manifest,
            method: method.name().to_string(),
            m: args.m,
            u: args.u,
            cluster_score,
            prediction,
            bootstrap,
        },
    )
}

#[derive(Serialize, Clone)]
struct BenchRow {
    n: usize,
    m: usize,
    method: String,
    err_mean: f64,
    err_sd: f64,
    fsr_mean: f64,
    fsr_sd: f64,
    nsr_mean: f64,
    nsr_sd: f64,
}

#[derive(Serialize, Clone)]
struct CurveRow {
    n: usize,
    method: String,
    group: usize,
    beta_sd_mean: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    if args.replicates == 0 {
        return Err(CliError::usage("replicates must be positive"));
    }
    ensure_dir(&args.out)?;
    let methods = [Method::TwoStage, Method::Ols, Method::Icc, Method::TrueLabels];
    let mut table: Vec<BenchRow> = Vec::new();
    let mut curves: Vec<CurveRow> = Vec::new();

    for &n in &args.n_grid {
        // err/fsr/nsr per method over replicate datasets.
        let per_rep: Vec<CliResult<Vec<(f64, f64, f64)>>> = (0..args.replicates)
            .into_par_iter()
            .map(|rep| {
                let data_seed = derive_seed(args.seed, (n as u64) << 20 | rep as u64);
                let mut cfg = ScenarioConfig::new(args.m, n, data_seed);
                cfg.r = args.r;
                cfg.p = args.p;
                cfg.u = args.u;
                let sim = generate_scenario(&cfg).map_err(CliError::from_core)?;
                let truth = sim.data.true_labels().unwrap();
                let mut rows = Vec::new();
                for (mi, &method) in methods.iter().enumerate() {
                    let fit_seed = derive_seed(data_seed, 0xbe + mi as u64);
                    let fit = run_method(&sim.data, method, args.m, args.u, fit_seed, &args.opts)?;
                    let score = fsr_nsr(&fit.labels, truth, args.m);
                    let err = if args.folds >= 2 {
                        let rule = if method == Method::TrueLabels {
                            PredictionRule::TrueLabels
                        } else {
                            PredictionRule::PosteriorAssign
                        };
                        cv_prediction_error_with(
                            &sim.data,
                            args.folds,
                            1,
                            derive_seed(fit_seed, 0xcf),
                            rule,
                            |train, seed| {
                                run_method(train, method, args.m, args.u, seed, &args.opts)
                                    .map_err(|e| envmix::Error::InvalidArgument(e.message))
                            },
                        )
                        .map_err(CliError::from_core)?
                        .mean_error
                    } else {
                        f64::NAN
                    };
                    rows.push((err, score.fsr, score.nsr));
                }
                Ok(rows)
            })
            .collect();
        let per_rep: Vec<Vec<(f64, f64, f64)>> =
            per_rep.into_iter().collect::<CliResult<Vec<_>>>()?;

        for (mi, &method) in methods.iter().enumerate() {
            let errs: Vec<f64> = per_rep.iter().map(|r| r[mi].0).collect();
            let fsrs: Vec<f64> = per_rep.iter().map(|r| r[mi].1).collect();
            let nsrs: Vec<f64> = per_rep.iter().map(|r| r[mi].2).collect();
            let (err_mean, err_sd) = mean_sd(&errs);
            let (fsr_mean, fsr_sd) = mean_sd(&fsrs);
            let (nsr_mean, nsr_sd) = mean_sd(&nsrs);
            table.push(BenchRow {
                n,
                m: args.m,
                method: method.name().to_string(),
                err_mean,
                err_sd,
                fsr_mean,
                fsr_sd,
                nsr_mean,
                nsr_sd,
            });
        }

        if args.bootstrap >= 2 {
            // SD curves from the first replicate dataset of each n.
            let data_seed = derive_seed(args.seed, (n as u64) << 20);
            let mut cfg = ScenarioConfig::new(args.m, n, data_seed);
            cfg.r = args.r;
            cfg.p = args.p;
            cfg.u = args.u;
            let sim = generate_scenario(&cfg).map_err(CliError::from_core)?;
            for (mi, &method) in methods.iter().enumerate() {
                let boot_seed = derive_seed(data_seed, 0xb5e + mi as u64);
                let report = bootstrap_se_with(&sim.data, args.m, args.bootstrap, boot_seed, |d, seed| {
                    run_method(d, method, args.m, args.u, seed, &args.opts)
                        .map_err(|e| envmix::Error::InvalidArgument(e.message))
                })
                .map_err(CliError::from_core)?;
                for (g, &sd) in report.group_mean_sd.iter().enumerate() {
                    curves.push(CurveRow {
                        n,
                        method: method.name().to_string(),
                        group: g + 1,
                        beta_sd_mean: sd,
                    });
                }
            }
        }
    }

    let table_path = args.out.join("table.csv");
    let mut w = csv::Writer::from_path(&table_path)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", table_path.display())))?;
    for row in &table {
        w.serialize(row).map_err(CliError::from_csv)?;
    }
    w.flush()
        .map_err(|e| CliError::data(format!("cannot flush {}: {e}", table_path.display())))?;

    if !curves.is_empty() {
        let curves_path = args.out.join("bootstrap_curves.csv");
        let mut w = csv::Writer::from_path(&curves_path)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", curves_path.display())))?;
        for row in &curves {
            w.serialize(row).map_err(CliError::from_csv)?;
        }
        w.flush()
            .map_err(|e| CliError::data(format!("cannot flush {}: {e}", curves_path.display())))?;
    }

    let manifest = args.opts.record(
        RunManifest::new("bench")
            .output(&args.out.display().to_string())
            .opt("m", args.m)
            .opt("n_grid", args.n_grid.clone())
            .opt("r", args.r)
            .opt("p", args.p)
            .opt("u", args.u)
            .opt("replicates", args.replicates)
            .opt("folds", args.folds)
            .opt("bootstrap", args.bootstrap)
            .opt("seed", args.seed),
    );
    #[derive(Serialize)]
    struct BenchJson {
        manifest: RunManifest,
        table: Vec<BenchRow>,
        bootstrap_curves: Vec<CurveRow>,
    }
    io::write_json(
        &args.out.join("bench.json"),
        &BenchJson {
            manifest,
            table,
            bootstrap_curves: curves,
        },
    )?;
    Ok(())
}
