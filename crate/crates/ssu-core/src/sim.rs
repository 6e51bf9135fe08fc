//! Data-generating models, the seeded Monte Carlo harness, and the empirical
//! Kolmogorov diagnostic.
//!
//! Every repetition draws its data from a stream keyed by
//! `(base_seed, rep, role)`, so reports are identical across runs and worker
//! counts; aggregation reduces per-repetition values in index order.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{build_hooks_density, build_hooks_mu2, u_adapt, BivariateHooks, CondDensitySpec};
use crate::data::{split_crossfit, Matrix, SemiDataset};
use crate::estimators::{u_cross_point, u_oracle, u_plug_point};
use crate::kernels::{Ell1Mode, KernelSpec};
use crate::numerics::{ksum, mean, phi, population_variance, KahanSum};
use crate::rank_tests::{
    kendall_classical, kendall_plug, kendall_ss, wilcoxon_classical, wilcoxon_plug, wilcoxon_ss,
    TestResult,
};
use crate::regress::RegressorSpec;
use crate::rng::{roles, Stream};
use crate::ustat::u_statistic;
use crate::{Error, Result};

/// Data-generating models (d is fixed per variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// d = 10, `Y = X1 + ... + X5 + 0.3 eps`, X ~ N(0, I).
    VarModel1,
    /// d = 10, `Y = delta * sqrt(X1^2 + X2^2 + 0.09 eps^2)`, delta = +-1.
    VarModel2,
    /// d = 4, equicorrelated X (0.3 I + 0.7 J), `Y = mu + X1 + X2 + 0.3 eps`.
    Mu2Model1 { mu: f64 },
    /// d = 4, same X, `Y = mu + sin(5 X1) + sin(3 X2) + 0.3 eps`.
    Mu2Model2 { mu: f64 },
    /// d = 2, correlation rho, `V = X1 + 0.05 eps1`, `W = X2 + 0.05 eps2`.
    KendallModel { rho: f64 },
    /// d = 4, equicorrelated X, `Y = mu + X1 + X2 + 0.05 eps`.
    WilcoxonModel { mu: f64 },
    /// d = 1, `Y = X ~ N(0,1)`; assistants come from the slow-convergence
    /// construction with mean squared prediction error `eps_n`.
    BeAdversarial { eps_n: f64 },
    /// d = 1, `X ~ N(mu, 1)`, `Y = X + noise_sd * eps`.
    LinearUnivariate { mu: f64, noise_sd: f64 },
}

/// Closed-form facts about a model, where available.
#[derive(Clone)]
pub struct ModelOracle {
    /// `E[Var(Y|X)]`.
    pub e_var_y_given_x: Option<f64>,
    /// `Var[E(Y|X)]`.
    pub var_e_y_given_x: Option<f64>,
    /// `Var(Y)`.
    pub var_y: Option<f64>,
    /// True conditional mean `E(Y | X = x)`.
    pub cond_mean: Option<Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>>,
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::VarModel1 | ModelSpec::VarModel2 => 10,
            ModelSpec::Mu2Model1 { .. } | ModelSpec::Mu2Model2 { .. } => 4,
            ModelSpec::KendallModel { .. } => 2,
            ModelSpec::WilcoxonModel { .. } => 4,
            ModelSpec::BeAdversarial { .. } | ModelSpec::LinearUnivariate { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::KendallModel { rho } if rho.abs() >= 1.0 => Err(Error::InvalidParam(
                format!("kendall correlation must satisfy |rho| < 1, got {rho}"),
            )),
            ModelSpec::BeAdversarial { eps_n } if !(*eps_n >= 0.0) => Err(Error::InvalidParam(
                format!("eps_n must be nonnegative, got {eps_n}"),
            )),
            ModelSpec::LinearUnivariate { noise_sd, .. } if *noise_sd < 0.0 => Err(
                Error::InvalidParam(format!("noise_sd must be nonnegative, got {noise_sd}")),
            ),
            _ => Ok(()),
        }
    }

    /// Draw a dataset of `n` labeled and `m` unlabeled rows.
    pub fn generate(&self, n: usize, m: usize, stream: &mut Stream) -> Result<SemiDataset> {
        if n == 0 {
            return Err(Error::InvalidParam("n must be >= 1".into()));
        }
        self.validate()?;
        let d = self.dim();
        let mut lx: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ly: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ux: Vec<Vec<f64>> = Vec::with_capacity(m);
        for i in 0..n + m {
            let labeled = i < n;
            let (x, y) = self.draw_row(labeled, stream);
            if labeled {
                lx.push(x);
                ly.push(y.expect("labeled rows carry a response"));
            } else {
                ux.push(x);
            }
        }
        SemiDataset::new(
            Matrix::from_rows(&lx)?,
            Matrix::from_rows(&ly)?,
            if m == 0 { Matrix::empty(d) } else { Matrix::from_rows(&ux)? },
        )
    }

    fn draw_row(&self, labeled: bool, s: &mut Stream) -> (Vec<f64>, Option<Vec<f64>>) {
        match self {
            ModelSpec::VarModel1 => {
                let x: Vec<f64> = (0..10).map(|_| s.next_normal()).collect();
                let y = labeled.then(|| {
                    let g = ksum(&x[..5]);
                    vec![g + 0.3 * s.next_normal()]
                });
                (x, y)
            }
            ModelSpec::VarModel2 => {
                let x: Vec<f64> = (0..10).map(|_| s.next_normal()).collect();
                let y = labeled.then(|| {
                    let eps = s.next_normal();
                    let delta = if s.next_f64() < 0.5 { -1.0 } else { 1.0 };
                    vec![delta * (x[0] * x[0] + x[1] * x[1] + 0.09 * eps * eps).sqrt()]
                });
                (x, y)
            }
            ModelSpec::Mu2Model1 { mu } | ModelSpec::WilcoxonModel { mu } => {
                let noise = if matches!(self, ModelSpec::Mu2Model1 { .. }) { 0.3 } else { 0.05 };
                let x = equicorrelated4(s);
                let y = labeled.then(|| vec![mu + x[0] + x[1] + noise * s.next_normal()]);
                (x, y)
            }
            ModelSpec::Mu2Model2 { mu } => {
                let x = equicorrelated4(s);
                let y = labeled.then(|| {
                    vec![mu + (5.0 * x[0]).sin() + (3.0 * x[1]).sin() + 0.3 * s.next_normal()]
                });
                (x, y)
            }
            ModelSpec::KendallModel { rho } => {
                let z1 = s.next_normal();
                let z2 = s.next_normal();
                let x = vec![z1, rho * z1 + (1.0 - rho * rho).sqrt() * z2];
                let y = labeled.then(|| {
                    vec![
                        x[0] + 0.05 * s.next_normal(),
                        x[1] + 0.05 * s.next_normal(),
                    ]
                });
                (x, y)
            }
            ModelSpec::BeAdversarial { .. } => {
                let z = s.next_normal();
                (vec![z], labeled.then(|| vec![z]))
            }
            ModelSpec::LinearUnivariate { mu, noise_sd } => {
                let x = mu + s.next_normal();
                let y = labeled.then(|| vec![x + noise_sd * s.next_normal()]);
                (vec![x], y)
            }
        }
    }

    /// True value of `psi` for a named builtin kernel, where derivable.
    pub fn psi(&self, kernel: &str) -> Option<f64> {
        match (self, kernel) {
            (ModelSpec::VarModel1, "variance") => Some(5.09),
            (ModelSpec::VarModel1, "mean") => Some(0.0),
            (ModelSpec::VarModel2, "variance") => Some(2.09),
            (ModelSpec::VarModel2, "mean") => Some(0.0),
            (ModelSpec::Mu2Model1 { mu } | ModelSpec::Mu2Model2 { mu }, "product") => {
                Some(mu * mu)
            }
            (ModelSpec::Mu2Model1 { mu } | ModelSpec::Mu2Model2 { mu }, "mean") => Some(*mu),
            (ModelSpec::KendallModel { rho }, "kendall") => {
                // corr(V, W) = rho / (1 + 0.05^2); tau = 2/pi * asin(corr).
                let corr = rho / 1.0025;
                Some(2.0 / std::f64::consts::PI * corr.asin())
            }
            (ModelSpec::WilcoxonModel { mu }, "wilcoxon") => {
                // Y ~ N(mu, 3.4 + 0.0025); P(Y1 + Y2 > 0) = Phi(sqrt(2) mu / sd).
                let sd = (3.4f64 + 0.0025).sqrt();
                Some(phi(std::f64::consts::SQRT_2 * mu / sd))
            }
            (ModelSpec::BeAdversarial { .. }, "mean") => Some(0.0),
            (ModelSpec::LinearUnivariate { mu, .. }, "product") => Some(mu * mu),
            (ModelSpec::LinearUnivariate { mu, .. }, "mean") => Some(*mu),
            _ => None,
        }
    }

    /// Closed-form model facts.
    pub fn oracle(&self) -> ModelOracle {
        match self {
            ModelSpec::VarModel1 => ModelOracle {
                e_var_y_given_x: Some(0.09),
                var_e_y_given_x: Some(5.0),
                var_y: Some(5.09),
                cond_mean: Some(Arc::new(|x: &[f64]| ksum(&x[..5]))),
            },
            ModelSpec::VarModel2 => ModelOracle {
                e_var_y_given_x: Some(2.09),
                var_e_y_given_x: Some(0.0),
                var_y: Some(2.09),
                cond_mean: Some(Arc::new(|_| 0.0)),
            },
            ModelSpec::Mu2Model1 { mu } => {
                let mu = *mu;
                ModelOracle {
                    e_var_y_given_x: Some(0.09),
                    var_e_y_given_x: Some(3.4),
                    var_y: Some(3.49),
                    cond_mean: Some(Arc::new(move |x: &[f64]| mu + x[0] + x[1])),
                }
            }
            ModelSpec::Mu2Model2 { mu } => {
                let mu = *mu;
                ModelOracle {
                    e_var_y_given_x: Some(0.09),
                    var_e_y_given_x: None,
                    var_y: None,
                    cond_mean: Some(Arc::new(move |x: &[f64]| {
                        mu + (5.0 * x[0]).sin() + (3.0 * x[1]).sin()
                    })),
                }
            }
            ModelSpec::KendallModel { .. } => ModelOracle {
                e_var_y_given_x: None,
                var_e_y_given_x: None,
                var_y: None,
                cond_mean: None,
            },
            ModelSpec::WilcoxonModel { mu } => {
                let mu = *mu;
                ModelOracle {
                    e_var_y_given_x: Some(0.0025),
                    var_e_y_given_x: Some(3.4),
                    var_y: Some(3.4025),
                    cond_mean: Some(Arc::new(move |x: &[f64]| mu + x[0] + x[1])),
                }
            }
            ModelSpec::BeAdversarial { .. } => ModelOracle {
                e_var_y_given_x: Some(0.0),
                var_e_y_given_x: Some(1.0),
                var_y: Some(1.0),
                cond_mean: Some(Arc::new(|x: &[f64]| x[0])),
            },
            ModelSpec::LinearUnivariate { noise_sd, .. } => {
                let nv = noise_sd * noise_sd;
                ModelOracle {
                    e_var_y_given_x: Some(nv),
                    var_e_y_given_x: Some(1.0),
                    var_y: Some(1.0 + nv),
                    cond_mean: Some(Arc::new(|x: &[f64]| x[0])),
                }
            }
        }
    }

    /// Optimal assistant `psi1(x) = E[ell1(Y) | X = x]` for a builtin kernel,
    /// where derivable.
    pub fn psi1(&self, kernel: &str) -> Option<Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>> {
        let oracle = self.oracle();
        match kernel {
            "mean" => oracle.cond_mean,
            "variance" => {
                // psi1(x) = (E[Y^2|X=x]) / 2 + E[Y^2] / 2 when E(Y) = 0.
                let g = oracle.cond_mean?;
                let cv = oracle.e_var_y_given_x?;
                let var_y = oracle.var_y?;
                let mean_zero = matches!(self, ModelSpec::VarModel1 | ModelSpec::VarModel2);
                if !mean_zero {
                    return None;
                }
                Some(Arc::new(move |x: &[f64]| {
                    let m = g(x);
                    0.5 * (m * m + cv) + 0.5 * var_y
                }))
            }
            "product" => {
                // ell1(y) = mu y, so psi1(x) = mu E(Y | X = x).
                let mu = match self {
                    ModelSpec::Mu2Model1 { mu }
                    | ModelSpec::Mu2Model2 { mu }
                    | ModelSpec::LinearUnivariate { mu, .. } => *mu,
                    _ => return None,
                };
                let g = oracle.cond_mean?;
                Some(Arc::new(move |x: &[f64]| mu * g(x)))
            }
            _ => None,
        }
    }
}

fn equicorrelated4(s: &mut Stream) -> Vec<f64> {
    // Exact sampler for 0.3 I + 0.7 J: sqrt(0.7) Z0 + sqrt(0.3) Z_i.
    let z0 = s.next_normal();
    (0..4)
        .map(|_| 0.7f64.sqrt() * z0 + 0.3f64.sqrt() * s.next_normal())
        .collect()
}

/// Estimator (or test) descriptor evaluated per repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    Classical,
    /// Semi-supervised estimator with the model's closed-form `psi1`.
    Oracle,
    Cross { regressor: String },
    Plug { regressor: String },
    /// Adaptive estimator with hooks from the model's true conditional mean.
    AdaptOracle,
    /// Adaptive estimator with cross-fitted conditional-mean hooks.
    AdaptMu2 { regressor: String },
    /// Adaptive estimator with conditional-density Monte Carlo hooks.
    AdaptDensity { k: usize, b: usize },
}

impl EstimatorSpec {
    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::Classical => "classical".into(),
            EstimatorSpec::Oracle => "oracle".into(),
            EstimatorSpec::Cross { regressor } => format!("cross:{regressor}"),
            EstimatorSpec::Plug { regressor } => format!("plug:{regressor}"),
            EstimatorSpec::AdaptOracle => "adapt_oracle".into(),
            EstimatorSpec::AdaptMu2 { regressor } => format!("adapt_mu2:{regressor}"),
            EstimatorSpec::AdaptDensity { k, b } => format!("adapt_density:k={k},b={b}"),
        }
    }
}

/// One simulation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub name: String,
    pub model: ModelSpec,
    pub kernel: String,
    pub n: usize,
    pub m: usize,
    pub reps: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Worker count; `None` uses the global pool. Results do not depend on it.
    #[serde(default)]
    pub parallelism: Option<usize>,
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    M,
    Mu,
    Rho,
    EpsN,
}

impl SimConfig {
    fn validated(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidParam("reps must be >= 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::EmptyData("estimator list must be non-empty"));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::InvalidParam(format!(
                    "alpha must lie in (0,1), got {a}"
                )));
            }
        }
        self.model.validate()?;
        KernelSpec::by_name(&self.kernel)?;
        Ok(())
    }

    /// Copy with a sweep parameter applied.
    pub fn with_param(&self, param: SweepParam, value: f64) -> Result<SimConfig> {
        let mut cfg = self.clone();
        match param {
            SweepParam::M => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidParam(format!(
                        "sweep over m needs nonnegative integers, got {value}"
                    )));
                }
                cfg.m = value as usize;
            }
            SweepParam::Mu => match &mut cfg.model {
                ModelSpec::Mu2Model1 { mu }
                | ModelSpec::Mu2Model2 { mu }
                | ModelSpec::WilcoxonModel { mu }
                | ModelSpec::LinearUnivariate { mu, .. } => *mu = value,
                _ => {
                    return Err(Error::InvalidParam(
                        "mu sweep needs a model with a mu parameter".into(),
                    ))
                }
            },
            SweepParam::Rho => match &mut cfg.model {
                ModelSpec::KendallModel { rho } => *rho = value,
                _ => {
                    return Err(Error::InvalidParam(
                        "rho sweep needs the kendall model".into(),
                    ))
                }
            },
            SweepParam::EpsN => match &mut cfg.model {
                ModelSpec::BeAdversarial { eps_n } => *eps_n = value,
                _ => {
                    return Err(Error::InvalidParam(
                        "eps_n sweep needs the adversarial model".into(),
                    ))
                }
            },
        }
        Ok(cfg)
    }
}

/// Per-estimator aggregates over the repetitions.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorReport {
    pub estimator: String,
    /// Sweep value this row belongs to, if any.
    pub param: Option<f64>,
    pub mean: f64,
    pub variance: f64,
    pub bias: Option<f64>,
    pub mse: Option<f64>,
    /// MSE of the classical U-statistic divided by this estimator's MSE
    /// (values above one mean the estimator is more efficient).
    pub mse_ratio_vs_classical: Option<f64>,
    pub rejection_rate: Option<f64>,
    pub kolmogorov: Option<f64>,
    /// Closed-form prediction of the distribution-function gap at t = 1
    /// (adversarial scenario only).
    pub pred_gap_t1: Option<f64>,
    /// Simulated distribution-function gap at t = 1.
    pub ecdf_gap_t1: Option<f64>,
}

/// Report for one experiment: config echo plus per-estimator aggregates.
#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub config: SimConfig,
    pub rows: Vec<EstimatorReport>,
    pub wall_secs: f64,
    pub version: String,
}

pub const SCHEMA_VERSION: u32 = 1;

fn run_in_pool<T: Send>(parallelism: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match parallelism {
        None | Some(0) => Ok(job()),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::InvalidParam(format!("thread pool: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

fn wrap_rep_error(rep: usize, seed: u64, err: Error) -> Error {
    Error::InvalidParam(format!(
        "repetition {rep} failed (base_seed {seed}, rep stream keyed ({seed}, {rep}, data)): {err}"
    ))
}

/// Point-estimation experiment: evaluates every estimator on each generated
/// dataset and aggregates mean / bias / variance / MSE and MSE ratios.
pub fn run_mse_experiment(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validated()?;
    let start = std::time::Instant::now();
    let kernel = KernelSpec::by_name(&cfg.kernel)?;
    let estimators = cfg.estimators.clone();
    // Resolve estimator prerequisites before burning repetitions.
    let psi1 = cfg.model.psi1(&cfg.kernel);
    for est in &estimators {
        match est {
            EstimatorSpec::Oracle if psi1.is_none() => {
                return Err(Error::Unsupported(format!(
                    "model has no closed-form psi1 for kernel `{}`",
                    cfg.kernel
                )))
            }
            EstimatorSpec::AdaptOracle if cfg.model.oracle().cond_mean.is_none() => {
                return Err(Error::Unsupported(
                    "model has no closed-form conditional mean".into(),
                ))
            }
            EstimatorSpec::Cross { regressor }
            | EstimatorSpec::Plug { regressor }
            | EstimatorSpec::AdaptMu2 { regressor } => {
                RegressorSpec::parse(regressor)?;
            }
            _ => {}
        }
    }

    let values: Vec<Vec<f64>> = run_in_pool(cfg.parallelism, || {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| -> Result<Vec<f64>> {
                let mut stream = Stream::keyed(cfg.base_seed, &[rep as u64, roles::DATA]);
                let ds = cfg
                    .model
                    .generate(cfg.n, cfg.m, &mut stream)
                    .map_err(|e| wrap_rep_error(rep, cfg.base_seed, e))?;
                estimators
                    .iter()
                    .map(|est| {
                        evaluate_estimator(est, &ds, &kernel, &cfg.model, cfg.base_seed, rep)
                            .map_err(|e| wrap_rep_error(rep, cfg.base_seed, e))
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let psi = cfg.model.psi(&cfg.kernel);
    let mut rows = Vec::with_capacity(estimators.len());
    let mut mse_classical = None;
    for (j, est) in estimators.iter().enumerate() {
        let col: Vec<f64> = values.iter().map(|v| v[j]).collect();
        let m = mean(&col);
        let var = population_variance(&col);
        let (bias, mse) = match psi {
            Some(p) => {
                let b = m - p;
                let mut acc = KahanSum::new();
                for &v in &col {
                    let d = v - p;
                    acc.add(d * d);
                }
                (Some(b), Some(acc.total() / col.len() as f64))
            }
            None => (None, None),
        };
        if matches!(est, EstimatorSpec::Classical) {
            mse_classical = mse;
        }
        rows.push(EstimatorReport {
            estimator: est.label(),
            param: None,
            mean: m,
            variance: var,
            bias,
            mse,
            mse_ratio_vs_classical: None,
            rejection_rate: None,
            kolmogorov: None,
            pred_gap_t1: None,
            ecdf_gap_t1: None,
        });
    }
    if let Some(base) = mse_classical {
        for row in &mut rows {
            if let Some(mse) = row.mse {
                if mse > 0.0 {
                    row.mse_ratio_vs_classical = Some(base / mse);
                }
            }
        }
    }
    Ok(SimReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        rows,
        wall_secs: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

fn evaluate_estimator(
    est: &EstimatorSpec,
    ds: &SemiDataset,
    kernel: &KernelSpec,
    model: &ModelSpec,
    base_seed: u64,
    rep: usize,
) -> Result<f64> {
    match est {
        EstimatorSpec::Classical => u_statistic(kernel, ds.labeled_y()),
        EstimatorSpec::Oracle => {
            let psi1 = model
                .psi1(kernel.name())
                .ok_or_else(|| Error::Unsupported("no closed-form psi1".into()))?;
            u_oracle(ds, kernel, &*psi1)
        }
        EstimatorSpec::Cross { regressor } => {
            let spec = RegressorSpec::parse(regressor)?;
            Ok(u_cross_point(ds, kernel, &spec, Ell1Mode::Auto)?.0)
        }
        EstimatorSpec::Plug { regressor } => {
            let spec = RegressorSpec::parse(regressor)?;
            Ok(u_plug_point(ds, kernel, &spec, Ell1Mode::Auto)?.0)
        }
        EstimatorSpec::AdaptOracle => {
            let g_fn = model
                .oracle()
                .cond_mean
                .ok_or_else(|| Error::Unsupported("no closed-form conditional mean".into()))?;
            let g: Vec<f64> = (0..ds.n() + ds.m()).map(|i| g_fn(ds.x_global(i))).collect();
            u_adapt(ds, kernel, &BivariateHooks::cond_mean(g))
        }
        EstimatorSpec::AdaptMu2 { regressor } => {
            let spec = RegressorSpec::parse(regressor)?;
            let split = split_crossfit(ds)?;
            let hooks = build_hooks_mu2(ds, &split, &spec)?;
            u_adapt(ds, kernel, &hooks)
        }
        EstimatorSpec::AdaptDensity { k, b } => {
            let split = split_crossfit(ds)?;
            let density_seed =
                Stream::keyed(base_seed, &[rep as u64, roles::DENSITY]).next_u64();
            let hooks = build_hooks_density(
                ds,
                &split,
                &CondDensitySpec { k: *k, smoothing_bw: 0.0 },
                *b,
                density_seed,
            )?;
            u_adapt(ds, kernel, &hooks)
        }
    }
}

/// Hypothesis-testing experiment: `kernel` selects the test family
/// ("kendall" or "wilcoxon"); `classical`, `cross` and `plug` descriptors map
/// to the corresponding tests. Aggregates rejection rates and the moments of
/// the standardized statistic.
pub fn run_test_experiment(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validated()?;
    let start = std::time::Instant::now();
    let alpha = cfg.alpha.unwrap_or(0.05);
    if !matches!(cfg.kernel.as_str(), "kendall" | "wilcoxon") {
        return Err(Error::Unsupported(format!(
            "test experiments cover the kendall and wilcoxon families, got `{}`",
            cfg.kernel
        )));
    }
    for est in &cfg.estimators {
        match est {
            EstimatorSpec::Classical => {}
            EstimatorSpec::Cross { regressor } | EstimatorSpec::Plug { regressor } => {
                RegressorSpec::parse(regressor)?;
            }
            other => {
                return Err(Error::Unsupported(format!(
                    "test experiments accept classical/cross/plug descriptors, got `{}`",
                    other.label()
                )))
            }
        }
    }
    let estimators = cfg.estimators.clone();
    let kendall = cfg.kernel == "kendall";

    let outcomes: Vec<Vec<(f64, bool)>> = run_in_pool(cfg.parallelism, || {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| -> Result<Vec<(f64, bool)>> {
                let mut stream = Stream::keyed(cfg.base_seed, &[rep as u64, roles::DATA]);
                let ds = cfg
                    .model
                    .generate(cfg.n, cfg.m, &mut stream)
                    .map_err(|e| wrap_rep_error(rep, cfg.base_seed, e))?;
                estimators
                    .iter()
                    .map(|est| {
                        let result: TestResult = match (est, kendall) {
                            (EstimatorSpec::Classical, true) => {
                                kendall_classical(ds.labeled_y(), alpha)?
                            }
                            (EstimatorSpec::Classical, false) => {
                                wilcoxon_classical(&ds.labeled_y().column0(), alpha)?
                            }
                            (EstimatorSpec::Cross { regressor }, true) => {
                                kendall_ss(&ds, &RegressorSpec::parse(regressor)?, alpha)?
                            }
                            (EstimatorSpec::Cross { regressor }, false) => {
                                wilcoxon_ss(&ds, &RegressorSpec::parse(regressor)?, alpha)?
                            }
                            (EstimatorSpec::Plug { regressor }, true) => {
                                kendall_plug(&ds, &RegressorSpec::parse(regressor)?, alpha)?
                            }
                            (EstimatorSpec::Plug { regressor }, false) => {
                                wilcoxon_plug(&ds, &RegressorSpec::parse(regressor)?, alpha)?
                            }
                            _ => unreachable!("descriptors validated above"),
                        };
                        Ok((result.statistic, result.reject))
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| wrap_rep_error(rep, cfg.base_seed, e))
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut rows = Vec::with_capacity(estimators.len());
    for (j, est) in estimators.iter().enumerate() {
        let stats: Vec<f64> = outcomes.iter().map(|v| v[j].0).collect();
        let rejections = outcomes.iter().filter(|v| v[j].1).count();
        rows.push(EstimatorReport {
            estimator: est.label(),
            param: None,
            mean: mean(&stats),
            variance: population_variance(&stats),
            bias: None,
            mse: None,
            mse_ratio_vs_classical: None,
            rejection_rate: Some(rejections as f64 / cfg.reps as f64),
            kolmogorov: None,
            pred_gap_t1: None,
            ecdf_gap_t1: None,
        });
    }
    Ok(SimReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        rows,
        wall_secs: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

/// Exact Kolmogorov distance between the empirical distribution of `values`
/// and the standard normal: the sup over jump points of both one-sided gaps.
pub fn empirical_kolmogorov(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyData("kolmogorov distance needs values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut sup: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = phi(x);
        sup = sup.max((cdf - i as f64 / n).abs());
        sup = sup.max(((i + 1) as f64 / n - cdf).abs());
    }
    Ok(sup)
}

/// Assistants of the slow-convergence construction: slope `sqrt(eps_n)/2` on
/// each fold plus a fold-specific random intercept (which cancels in the
/// correction display).
fn be_cross_point(ds: &SemiDataset, eps_n: f64) -> f64 {
    let n = ds.n();
    let m = ds.m();
    let n1 = n / 2;
    let m1 = m / 2;
    let slope = eps_n.sqrt() / 2.0;
    let fold_sum = |range: std::ops::Range<usize>| -> f64 {
        let vals: Vec<f64> = range.map(|i| ds.labeled_x().row(i)[0]).collect();
        ksum(&vals)
    };
    let c1 = slope * fold_sum(0..n1) / (n1 as f64).sqrt();
    let c2 = slope * fold_sum(n1..n) / ((n - n1) as f64).sqrt();
    // Cross-fit routing: fold-1 points scored by f2, fold-2 by f1.
    let mut lab = KahanSum::new();
    for i in 0..n {
        let x = ds.labeled_x().row(i)[0];
        lab.add(slope * x + if i < n1 { c2 } else { c1 });
    }
    let mut unl = KahanSum::new();
    for j in 0..m {
        let x = ds.unlabeled_x().row(j)[0];
        unl.add(slope * x + if j < m1 { c2 } else { c1 });
    }
    let u = mean(&ds.labeled_y().column0());
    let sum_lab = lab.total();
    let sum_all = sum_lab + unl.total();
    u - sum_lab / n as f64 + sum_all / (n + m) as f64
}

/// Closed-form standard deviation of the standardized adversarial statistic:
/// with `e = sqrt(eps_n)/2` and `lam = n/m`,
/// `sd^2 = (1 - e/(1+lam))^2 + e^2 lam / (1+lam)^2`.
pub fn be_closed_form_sd(eps_n: f64, n: usize, m: usize) -> f64 {
    let e = eps_n.sqrt() / 2.0;
    let lam = n as f64 / m as f64;
    ((1.0 - e / (1.0 + lam)).powi(2) + e * e * lam / (1.0 + lam).powi(2)).sqrt()
}

/// Slow-convergence scenario: for each `eps_n` in the grid, simulates the
/// cross-fit estimator with the analytically specified assistants,
/// standardizes by the true scale (`Lambda = Var(Y) = 1`), and reports the
/// Kolmogorov distance plus the closed-form and simulated distribution gaps
/// at t = 1. Requires `m >= n`.
pub fn run_be_adversarial(cfg: &SimConfig, eps_grid: &[f64]) -> Result<SimReport> {
    cfg.validated()?;
    let start = std::time::Instant::now();
    if cfg.m < cfg.n {
        return Err(Error::InvalidParam(format!(
            "the adversarial scenario needs m >= n, got n={} m={}",
            cfg.n, cfg.m
        )));
    }
    if !matches!(cfg.model, ModelSpec::BeAdversarial { .. }) {
        return Err(Error::Unsupported(
            "run_be_adversarial needs the adversarial model".into(),
        ));
    }
    if eps_grid.is_empty() {
        return Err(Error::EmptyData("eps_n grid must be non-empty"));
    }
    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        if eps < 0.0 {
            return Err(Error::InvalidParam(format!("eps_n must be >= 0, got {eps}")));
        }
        let standardized: Vec<f64> = run_in_pool(cfg.parallelism, || {
            (0..cfg.reps)
                .into_par_iter()
                .map(|rep| -> Result<f64> {
                    let mut stream = Stream::keyed(cfg.base_seed, &[rep as u64, roles::DATA]);
                    let ds = cfg
                        .model
                        .generate(cfg.n, cfg.m, &mut stream)
                        .map_err(|e| wrap_rep_error(rep, cfg.base_seed, e))?;
                    Ok((cfg.n as f64).sqrt() * be_cross_point(&ds, eps))
                })
                .collect::<Result<Vec<_>>>()
        })??;
        let ks = empirical_kolmogorov(&standardized)?;
        let sd = be_closed_form_sd(eps, cfg.n, cfg.m);
        let pred_gap_t1 = (phi(1.0 / sd) - phi(1.0)).abs();
        let below = standardized.iter().filter(|&&v| v <= 1.0).count() as f64;
        let ecdf_gap_t1 = (below / cfg.reps as f64 - phi(1.0)).abs();
        rows.push(EstimatorReport {
            estimator: "be_cross".into(),
            param: Some(eps),
            mean: mean(&standardized),
            variance: population_variance(&standardized),
            bias: None,
            mse: None,
            mse_ratio_vs_classical: None,
            rejection_rate: None,
            kolmogorov: Some(ks),
            pred_gap_t1: Some(pred_gap_t1),
            ecdf_gap_t1: Some(ecdf_gap_t1),
        });
    }
    Ok(SimReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        rows,
        wall_secs: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

/// Run a sweep (or the single configured experiment), choosing the runner by
/// kernel family: `kendall`/`wilcoxon` run test experiments, the adversarial
/// model runs the Berry-Esseen scenario, everything else runs MSE
/// experiments. Sweep rows are stamped with their parameter value.
pub fn run_configured(cfg: &SimConfig) -> Result<Vec<SimReport>> {
    let single = |cfg: &SimConfig| -> Result<SimReport> {
        if matches!(cfg.model, ModelSpec::BeAdversarial { .. }) {
            let eps = match cfg.model {
                ModelSpec::BeAdversarial { eps_n } => eps_n,
                _ => unreachable!(),
            };
            run_be_adversarial(cfg, &[eps])
        } else if matches!(cfg.kernel.as_str(), "kendall" | "wilcoxon") {
            run_test_experiment(cfg)
        } else {
            run_mse_experiment(cfg)
        }
    };
    match &cfg.sweep {
        None => Ok(vec![single(cfg)?]),
        Some(sweep) => {
            let mut reports = Vec::with_capacity(sweep.values.len());
            for &v in &sweep.values {
                let mut sub = cfg.with_param(sweep.param, v)?;
                sub.sweep = None;
                let mut report = single(&sub)?;
                for row in &mut report.rows {
                    row.param.get_or_insert(v);
                }
                reports.push(report);
            }
            Ok(reports)
        }
    }
}

/// Long-format CSV rows (`experiment, estimator, param, metric, value`) for
/// external plotting.
pub fn write_csv_long<W: std::io::Write>(reports: &[SimReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["experiment", "estimator", "param", "metric", "value"])?;
    for report in reports {
        for row in &report.rows {
            let param = row
                .param
                .map(|p| p.to_string())
                .unwrap_or_default();
            let mut emit = |metric: &str, value: f64| -> Result<()> {
                w.write_record([
                    report.config.name.as_str(),
                    row.estimator.as_str(),
                    param.as_str(),
                    metric,
                    &value.to_string(),
                ])?;
                Ok(())
            };
            emit("mean", row.mean)?;
            emit("variance", row.variance)?;
            if let Some(v) = row.bias {
                emit("bias", v)?;
            }
            if let Some(v) = row.mse {
                emit("mse", v)?;
            }
            if let Some(v) = row.mse_ratio_vs_classical {
                emit("mse_ratio", v)?;
            }
            if let Some(v) = row.rejection_rate {
                emit("rejection_rate", v)?;
            }
            if let Some(v) = row.kolmogorov {
                emit("kolmogorov", v)?;
            }
            if let Some(v) = row.pred_gap_t1 {
                emit("pred_gap_t1", v)?;
            }
            if let Some(v) = row.ecdf_gap_t1 {
                emit("ecdf_gap_t1", v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
