//! `ssu`: semi-supervised U-statistics from the command line.
//!
//! Subcommands: `estimate` (point estimates with confidence intervals),
//! `test` (Kendall / Wilcoxon rank tests), `simulate` (TOML-configured Monte
//! Carlo experiments), `inspect` (dataset and split summary).
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ssu_core::adaptive::{build_hooks_density, build_hooks_mu2, u_adapt, CondDensitySpec};
use ssu_core::data::{load_dataset, split_crossfit, split_nested, CsvSchema, FoldId, SemiDataset};
use ssu_core::estimators::{u_cross, u_plug, u_single, Estimate, EstimateOptions};
use ssu_core::kernels::{Ell1Mode, KernelSpec, BUILTIN_NAMES};
use ssu_core::rank_tests::{
    kendall_classical, kendall_plug, kendall_ss, wilcoxon_classical, wilcoxon_plug, wilcoxon_ss,
    TestResult,
};
use ssu_core::regress::{fit, RegressorSpec};
use ssu_core::sim::{run_configured, write_csv_long, SimConfig, SCHEMA_VERSION};
use ssu_core::ustat::u_statistic;
use ssu_core::Error as CoreError;

const ESTIMATOR_NAMES: &[&str] = &["classical", "cross", "plug", "single", "adapt"];
const METHOD_NAMES: &[&str] = &[
    "kendall",
    "kendall-ss",
    "kendall-plug",
    "wilcoxon",
    "wilcoxon-ss",
    "wilcoxon-plug",
];
const REGRESSOR_FORMS: &[&str] = &[
    "knn:k=K",
    "partition:bins=B",
    "ols",
    "ridge:lambda=L[,bw=auto|H]",
];
const MODEL_NAMES: &[&str] = &[
    "var_model1",
    "var_model2",
    "mu2_model1",
    "mu2_model2",
    "kendall_model",
    "wilcoxon_model",
    "be_adversarial",
    "linear_univariate",
];

fn long_about() -> String {
    format!(
        "Semi-supervised U-statistics.\n\n\
         kernels:    {}\n\
         estimators: {}\n\
         methods:    {}\n\
         regressors: {}\n\
         models:     {}",
        BUILTIN_NAMES.join(", "),
        ESTIMATOR_NAMES.join(", "),
        METHOD_NAMES.join(", "),
        REGRESSOR_FORMS.join(", "),
        MODEL_NAMES.join(", "),
    )
}

#[derive(Parser)]
#[command(name = "ssu", version, about = "Semi-supervised U-statistics", long_about = long_about())]
struct Cli {
    /// Worker threads (falls back to the SSU_JOBS environment variable).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Point estimation with a confidence interval.
    Estimate(EstimateArgs),
    /// Rank tests (classical and semi-supervised).
    Test(TestArgs),
    /// Monte Carlo experiments from a TOML config.
    Simulate(SimulateArgs),
    /// Dataset and split summary.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Labeled CSV (`y` or `y1,y2` plus `x1..xd`).
    #[arg(long)]
    labeled: PathBuf,
    /// Unlabeled CSV (`x1..xd`).
    #[arg(long)]
    unlabeled: Option<PathBuf>,
    /// Pre-shuffle rows with this seed before splitting.
    #[arg(long)]
    shuffle_seed: Option<u64>,
}

impl DataArgs {
    fn load(&self) -> Result<SemiDataset, CoreError> {
        let ds = load_dataset(
            &self.labeled,
            self.unlabeled.as_deref(),
            &CsvSchema::default(),
        )?;
        Ok(match self.shuffle_seed {
            Some(seed) => ds.shuffled(seed),
            None => ds,
        })
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Kernel name.
    #[arg(long)]
    kernel: String,
    /// classical | cross | plug | single | adapt.
    #[arg(long)]
    estimator: String,
    /// Regressor spec (cross/plug/single), e.g. `knn:k=10`.
    #[arg(long)]
    regressor: Option<String>,
    /// Hook spec for `adapt`: `mu2:<regressor>` or `density:k=K,B=B`.
    #[arg(long)]
    hooks: Option<String>,
    /// Auxiliary labeled CSV to train the `single` assistant on.
    #[arg(long)]
    aux_labeled: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Use the generic first-projection estimator everywhere.
    #[arg(long)]
    generic_ell1: bool,
    /// Use the nested-split assistant fit (theory-faithful path).
    #[arg(long)]
    theory_split: bool,
    /// Seed for density-hook draws.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on n for pairwise kernels (guards quadratic runtimes).
    #[arg(long)]
    max_n: Option<usize>,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// kendall | kendall-ss | kendall-plug | wilcoxon | wilcoxon-ss | wilcoxon-plug.
    #[arg(long)]
    method: String,
    #[arg(long)]
    regressor: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config (TOML mirroring the SimConfig fields).
    #[arg(long)]
    config: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write long-format CSV rows (experiment, estimator, param, metric, value).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the effective config as TOML on stderr.
    #[arg(long)]
    echo_config: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    data: DataArgs,
}

/// CLI failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<CoreError> for Failure {
    fn from(err: CoreError) -> Self {
        let code = match &err {
            // Usage: the invocation itself is wrong.
            CoreError::UnknownKernel { .. } | CoreError::InvalidParam(_) => 1,
            // Data: the files or their shapes are wrong.
            CoreError::Csv(_)
            | CoreError::Io(_)
            | CoreError::MissingColumn(_)
            | CoreError::NonNumeric { .. }
            | CoreError::NonFinite { .. }
            | CoreError::DimensionMismatch { .. }
            | CoreError::EmptyData(_)
            | CoreError::SampleTooSmall { .. }
            | CoreError::FoldTooSmall(_)
            | CoreError::ArityMismatch { .. } => 2,
            // Numerical failure.
            CoreError::Singular(_)
            | CoreError::KnnTooLarge { .. }
            | CoreError::NoAnalyticEll1(_)
            | CoreError::Unsupported(_) => 3,
        };
        Self { code, message: err.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes; parse failures are
            // usage errors (exit 1 per the interface contract).
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let jobs = cli.jobs.or_else(|| {
        std::env::var("SSU_JOBS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(jobs) = jobs {
        if jobs > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global();
        }
    }
    let result = match cli.command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::Test(args) => cmd_test(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn default_pair_cap(order: usize) -> usize {
    match order {
        0 | 1 => usize::MAX,
        2 => 5000,
        3 => 300,
        _ => 80,
    }
}

fn estimate_json(estimator: &str, kernel: &str, e: &Estimate) -> serde_json::Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "estimator": estimator,
        "kernel": kernel,
        "point": e.point,
        "lambda_hat": e.lambda_hat,
        "ci_low": e.ci_low,
        "ci_high": e.ci_high,
        "alpha": e.alpha,
        "diagnostics": {
            "sigma2_hat": e.diagnostics.sigma2_hat,
            "tau_hat": e.diagnostics.tau_hat,
            "clamped": e.diagnostics.clamped,
            "improvement_ratio": e.diagnostics.improvement_ratio,
            "ridged_fit": e.diagnostics.ridged_fit,
        },
    })
}

fn cmd_estimate(args: EstimateArgs) -> Result<(), Failure> {
    let kernel = KernelSpec::by_name(&args.kernel)?;
    let ds = args.data.load()?;
    let cap = args.max_n.unwrap_or_else(|| default_pair_cap(kernel.order()));
    if ds.n() > cap {
        return Err(Failure::usage(format!(
            "n = {} exceeds the order-{} cap of {} (raise it with --max-n)",
            ds.n(),
            kernel.order(),
            cap
        )));
    }
    let ell1_mode = if args.generic_ell1 { Ell1Mode::Generic } else { Ell1Mode::Auto };
    let opts = EstimateOptions {
        alpha: args.alpha,
        ell1_fit: if args.theory_split { Ell1Mode::Generic } else { ell1_mode },
        ell1_var: ell1_mode,
    };
    let need_regressor = || -> Result<RegressorSpec, Failure> {
        let raw = args.regressor.as_deref().ok_or_else(|| {
            Failure::usage(format!(
                "--estimator {} requires --regressor (one of: {})",
                args.estimator,
                REGRESSOR_FORMS.join(", ")
            ))
        })?;
        Ok(RegressorSpec::parse(raw)?)
    };

    let payload = match args.estimator.as_str() {
        "classical" => {
            let point = u_statistic(&kernel, ds.labeled_y())?;
            json!({
                "schema_version": SCHEMA_VERSION,
                "estimator": "classical",
                "kernel": kernel.name(),
                "point": point,
                "n": ds.n(),
                "m": ds.m(),
            })
        }
        "cross" => {
            let e = u_cross(&ds, &kernel, &need_regressor()?, &opts)?;
            estimate_json("cross", kernel.name(), &e)
        }
        "plug" => {
            let e = u_plug(&ds, &kernel, &need_regressor()?, &opts)?;
            estimate_json("plug", kernel.name(), &e)
        }
        "single" => {
            let aux_path = args.aux_labeled.as_ref().ok_or_else(|| {
                Failure::usage("--estimator single requires --aux-labeled (disjoint training data)")
            })?;
            let aux = load_dataset(aux_path, None, &CsvSchema::default())?;
            let spec = need_regressor()?;
            let targets =
                ssu_core::kernels::ell1_values(&kernel, aux.labeled_y(), opts.ell1_fit)?;
            let model = fit(&spec, aux.labeled_x(), &targets)?;
            let e = u_single(&ds, &kernel, &model, &opts)?;
            estimate_json("single", kernel.name(), &e)
        }
        "adapt" => {
            let hooks_spec = args.hooks.as_deref().ok_or_else(|| {
                Failure::usage("--estimator adapt requires --hooks mu2:<regressor> or density:k=K,B=B")
            })?;
            let split = split_crossfit(&ds)?;
            let hooks = if let Some(reg) = hooks_spec.strip_prefix("mu2:") {
                build_hooks_mu2(&ds, &split, &RegressorSpec::parse(reg)?)?
            } else if let Some(rest) = hooks_spec.strip_prefix("density:") {
                let mut k = 0usize;
                let mut b = 0usize;
                for pair in rest.split(',') {
                    match pair.split_once('=') {
                        Some(("k", v)) => {
                            k = v.parse().map_err(|_| {
                                Failure::usage(format!("bad density k `{v}`"))
                            })?
                        }
                        Some(("B", v)) | Some(("b", v)) => {
                            b = v.parse().map_err(|_| {
                                Failure::usage(format!("bad density B `{v}`"))
                            })?
                        }
                        _ => return Err(Failure::usage(format!("bad density option `{pair}`"))),
                    }
                }
                let seed = args.seed.ok_or_else(|| {
                    Failure::usage("density hooks draw randomly; --seed is required")
                })?;
                build_hooks_density(
                    &ds,
                    &split,
                    &CondDensitySpec { k, smoothing_bw: 0.0 },
                    b,
                    seed,
                )?
            } else {
                return Err(Failure::usage(format!(
                    "unknown hooks spec `{hooks_spec}` (expected mu2:<regressor> or density:k=K,B=B)"
                )));
            };
            let point = u_adapt(&ds, &kernel, &hooks)?;
            json!({
                "schema_version": SCHEMA_VERSION,
                "estimator": "adapt",
                "kernel": kernel.name(),
                "hooks": hooks_spec,
                "point": point,
                "n": ds.n(),
                "m": ds.m(),
            })
        }
        other => {
            return Err(Failure::usage(format!(
                "unknown estimator `{other}`; available: {}",
                ESTIMATOR_NAMES.join(", ")
            )))
        }
    };
    println!("{}", serde_json::to_string_pretty(&payload).expect("json"));
    Ok(())
}

fn test_json(r: &TestResult) -> serde_json::Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "method": r.method,
        "statistic": r.statistic,
        "lambda_hat": r.lambda_hat,
        "p_value": r.p_value,
        "reject": r.reject,
        "alpha": r.alpha,
        "clamped": r.clamped,
        "tie_fraction": r.tie_fraction,
    })
}

fn cmd_test(args: TestArgs) -> Result<(), Failure> {
    let ds = args.data.load()?;
    let need_regressor = || -> Result<RegressorSpec, Failure> {
        let raw = args.regressor.as_deref().ok_or_else(|| {
            Failure::usage(format!("--method {} requires --regressor", args.method))
        })?;
        Ok(RegressorSpec::parse(raw)?)
    };
    let result = match args.method.as_str() {
        "kendall" => kendall_classical(ds.labeled_y(), args.alpha)?,
        "kendall-ss" => kendall_ss(&ds, &need_regressor()?, args.alpha)?,
        "kendall-plug" => kendall_plug(&ds, &need_regressor()?, args.alpha)?,
        "wilcoxon" => wilcoxon_classical(&ds.labeled_y().column0(), args.alpha)?,
        "wilcoxon-ss" => wilcoxon_ss(&ds, &need_regressor()?, args.alpha)?,
        "wilcoxon-plug" => wilcoxon_plug(&ds, &need_regressor()?, args.alpha)?,
        other => {
            return Err(Failure::usage(format!(
                "unknown method `{other}`; available: {}",
                METHOD_NAMES.join(", ")
            )))
        }
    };
    println!("{}", serde_json::to_string_pretty(&test_json(&result)).expect("json"));
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.config).map_err(CoreError::Io)?;
    let mut cfg: SimConfig = toml::from_str(&text)
        .map_err(|e| Failure { code: 2, message: format!("config parse: {e}") })?;
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    if cfg.name.is_empty() {
        cfg.name = args
            .config
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "experiment".into());
    }
    if args.echo_config {
        let echoed = toml::to_string_pretty(&cfg)
            .map_err(|e| Failure { code: 3, message: format!("config echo: {e}") })?;
        eprintln!("{echoed}");
    }
    let reports = run_configured(&cfg)?;
    let payload = serde_json::to_string_pretty(&reports).expect("json");
    match &args.out {
        Some(path) => std::fs::write(path, payload).map_err(CoreError::Io)?,
        None => println!("{payload}"),
    }
    if let Some(path) = &args.csv {
        let file = std::fs::File::create(path).map_err(CoreError::Io)?;
        write_csv_long(&reports, file)?;
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), Failure> {
    let ds = args.data.load()?;
    let split = split_crossfit(&ds)?;
    let nested = split_nested(&split, FoldId::One, ds.n()).ok();
    let payload = json!({
        "schema_version": SCHEMA_VERSION,
        "n": ds.n(),
        "m": ds.m(),
        "d": ds.d(),
        "response_arity": ds.q(),
        "fold1_labeled": [split.fold1_labeled.start, split.fold1_labeled.end],
        "fold2_labeled": [split.fold2_labeled.start, split.fold2_labeled.end],
        "fold1_unlabeled": [split.fold1_unlabeled.start, split.fold1_unlabeled.end],
        "fold2_unlabeled": [split.fold2_unlabeled.start, split.fold2_unlabeled.end],
        "nested_fold1": nested.map(|nest| json!({
            "part_a": [nest.part_a.start, nest.part_a.end],
            "part_b": [nest.part_b.start, nest.part_b.end],
        })),
        "shuffled": args.data.shuffle_seed.is_some(),
    });
    println!("{}", serde_json::to_string_pretty(&payload).expect("json"));
    Ok(())
}
