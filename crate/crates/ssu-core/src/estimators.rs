//! Semi-supervised U-statistics: the oracle, cross-fit, plug-in and
//! single-split estimators, asymptotic-variance formulas, the jackknife-based
//! variance estimate, confidence intervals, and control-variate /
//! aggregation coefficients.
//!
//! All estimators share the correction display
//!
//! ```text
//! point = U - (r/n) * sum_{i<=n} f(X_i) + (r/(n+m)) * sum_{i<=n+m} f(X_i)
//! ```
//!
//! differing only in how the assistant scores `f(X_i)` are produced. The
//! display is invariant to constant shifts of `f`, and with `m = 0` or a
//! constant `f` it collapses to the classical U-statistic.

use nalgebra::{DMatrix, DVector};

use crate::data::{split_crossfit, FoldId, Matrix, SemiDataset};
use crate::kernels::{ell1_values, Ell1Mode, KernelSpec};
use crate::numerics::{
    ksum, mean, phi, population_covariance, population_variance, z_quantile, KahanSum,
};
use crate::regress::{nested_fit_f, FittedModel, RegressorSpec};
use crate::ustat::{jackknife_sigma2, u_statistic};
use crate::{Error, Result};

/// Raw variance estimates below this are clamped (and flagged) so confidence
/// intervals stay computable.
pub const LAMBDA_FLOOR: f64 = 1e-12;

/// Point estimate with variance scale, confidence interval and diagnostics.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub point: f64,
    /// Variance scale `Lambda_hat`; the CI half-width is
    /// `z_{1-alpha/2} * sqrt(lambda_hat / n)`.
    pub lambda_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub sigma2_hat: f64,
    pub tau_hat: f64,
    /// True when the raw variance estimate fell below [`LAMBDA_FLOOR`].
    pub clamped: bool,
    /// Empirical `Cov(ell1_hat, f_hat) / Var(f_hat)`; `None` for a
    /// degenerate assistant.
    pub improvement_ratio: Option<f64>,
    /// Set when a rank-deficient least-squares fit fell back to ridge.
    pub ridged_fit: bool,
}

/// Population moments entering the asymptotic variance formula.
#[derive(Debug, Clone, Copy)]
pub struct MomentSummary {
    pub var_ell1: f64,
    pub var_f: f64,
    pub cov_f_psi1: f64,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
}

/// Options shared by the semi-supervised estimators.
#[derive(Debug, Clone, Copy)]
pub struct EstimateOptions {
    pub alpha: f64,
    /// First-projection mode for the nested assistant fit.
    pub ell1_fit: Ell1Mode,
    /// First-projection mode inside the variance estimate.
    pub ell1_var: Ell1Mode,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            ell1_fit: Ell1Mode::Auto,
            ell1_var: Ell1Mode::Auto,
        }
    }
}

/// Assistant scores at the labeled and unlabeled covariate rows.
#[derive(Debug, Clone)]
pub struct AssistantScores {
    pub labeled: Vec<f64>,
    pub unlabeled: Vec<f64>,
}

impl AssistantScores {
    fn correction(&self, r: usize, n: usize, m: usize) -> f64 {
        let sum_lab = ksum(&self.labeled);
        let sum_all = sum_lab + ksum(&self.unlabeled);
        let r = r as f64;
        -(r / n as f64) * sum_lab + (r / (n + m) as f64) * sum_all
    }
}

/// Semi-supervised U-statistic with a known assistant function.
pub fn u_oracle(
    ds: &SemiDataset,
    kernel: &KernelSpec,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<f64> {
    let u = u_statistic(kernel, ds.labeled_y())?;
    let scores = AssistantScores {
        labeled: (0..ds.n()).map(|i| f(ds.labeled_x().row(i))).collect(),
        unlabeled: (0..ds.m()).map(|j| f(ds.unlabeled_x().row(j))).collect(),
    };
    Ok(u + scores.correction(kernel.order(), ds.n(), ds.m()))
}

/// Cross-fit semi-supervised U-statistic. Fits one assistant per fold on the
/// fold's labeled rows and scores each point with the opposite fold's model;
/// unlabeled rows enter only through the correction sums.
pub fn u_cross(
    ds: &SemiDataset,
    kernel: &KernelSpec,
    spec: &RegressorSpec,
    opts: &EstimateOptions,
) -> Result<Estimate> {
    Ok(u_cross_with_scores(ds, kernel, spec, opts)?.0)
}

/// As [`u_cross`], additionally returning the cross-fit scores (the rank
/// tests reuse them for their variance displays).
pub fn u_cross_with_scores(
    ds: &SemiDataset,
    kernel: &KernelSpec,
    spec: &RegressorSpec,
    opts: &EstimateOptions,
) -> Result<(Estimate, AssistantScores)> {
    let (point, scores, ridged) = u_cross_point(ds, kernel, spec, opts.ell1_fit)?;
    let mut estimate = finish_estimate(ds, kernel, point, &scores, opts)?;
    estimate.diagnostics.ridged_fit = ridged;
    Ok((estimate, scores))
}

/// Point value and scores of the cross-fit estimator, skipping the variance
/// machinery (Monte Carlo loops evaluate thousands of points and estimate
/// variances across repetitions instead).
pub fn u_cross_point(
    ds: &SemiDataset,
    kernel: &KernelSpec,
    spec: &RegressorSpec,
    ell1_fit: Ell1Mode,
) -> Result<(f64, AssistantScores, bool)> {
    let r = kernel.order();
    let n = ds.n();
    if n < r.max(4) {
        return Err(Error::SampleTooSmall { need: r.max(4), got: n });
    }
    let split = split_crossfit(ds)?;
    let f1 = nested_fit_f(ds, &split, FoldId::One, kernel, spec, ell1_fit)?;
    let f2 = nested_fit_f(ds, &split, FoldId::Two, kernel, spec, ell1_fit)?;

    // f1 scores fold-2 points, f2 scores fold-1 points.
    let score_ranges = |model: &FittedModel,
                        lab: std::ops::Range<usize>,
                        unl: std::ops::Range<usize>|
     -> Result<(Vec<f64>, Vec<f64>)> {
        let lx = ds.labeled_x().slice_rows(lab);
        let ux = ds.unlabeled_x().slice_rows(unl);
        Ok((model.predict_many(&lx)?, model.predict_many(&ux)?))
    };
    let (lab1, unl1) =
        score_ranges(&f2, split.fold1_labeled.clone(), split.fold1_unlabeled.clone())?;
    let (lab2, unl2) =
        score_ranges(&f1, split.fold2_labeled.clone(), split.fold2_unlabeled.clone())?;
    let mut labeled = lab1;
    labeled.extend(lab2);
    let mut unlabeled = unl1;
    unlabeled.extend(unl2);
    let scores = AssistantScores { labeled, unlabeled };

    let u = u_statistic(kernel, ds.labeled_y())?;
    let point = u + scores.correction(r, n, ds.m());
    Ok((point, scores, f1.ridged || f2.ridged))
}

/// Plug-in semi-supervised U-statistic: one assistant fit on all labeled
/// rows scores every point.
pub fn u_plug(
    ds: &SemiDataset,
    kernel: &KernelSpec,
    spec: &RegressorSpec,
    opts: &EstimateOptions,
) -> Result<Estimate> {
    Ok(u_plug_with_scores(ds, kernel, spec, opts)?.0)
}

pub fn u_plug_with_scores(
    ds: &SemiDataset,
    kernel: &KernelSpec,
    spec: &RegressorSpec,
    opts: &EstimateOptions,
) -> Result<(Estimate, AssistantScores)> {
    let (point, scores, ridged) = u_plug_point(ds, kernel, spec, opts.ell1_fit)?;
    let mut estimate = finish_estimate(ds, kernel, point, &scores, opts)?;
    estimate.diagnostics.ridged_fit = ridged;
    Ok((estimate, scores))
}

/// Point value and scores of the plug-in estimator without the variance
/// machinery.
pub fn u_plug_point(
    ds: &SemiDataset,
    kernel: &KernelSpec,
    spec: &RegressorSpec,
    ell1_fit: Ell1Mode,
) -> Result<(f64, AssistantScores, bool)> {
    let r = kernel.order();
    let n = ds.n();
    if n < r.max(2) {
        return Err(Error::SampleTooSmall { need: r.max(2), got: n });
    }
    let targets = ell1_values(kernel, ds.labeled_y(), ell1_fit)?;
    let model = crate::regress::fit(spec, ds.labeled_x(), &targets)?;
    let scores = AssistantScores {
        labeled: model.predict_many(ds.labeled_x())?,
        unlabeled: model.predict_many(ds.unlabeled_x())?,
    };
    let u = u_statistic(kernel, ds.labeled_y())?;
    let point = u + scores.correction(r, n, ds.m());
    Ok((point, scores, model.ridged))
}

/// Single-split semi-supervised U-statistic: the plug-in display with an
/// externally supplied assistant. The caller guarantees `model` was trained
/// on data disjoint from `ds`; the variance estimate then targets the
/// fixed-assistant scale.
pub fn u_single(
    ds: &SemiDataset,
    kernel: &KernelSpec,
    model: &FittedModel,
    opts: &EstimateOptions,
) -> Result<Estimate> {
    let r = kernel.order();
    let scores = AssistantScores {
        labeled: model.predict_many(ds.labeled_x())?,
        unlabeled: model.predict_many(ds.unlabeled_x())?,
    };
    let u = u_statistic(kernel, ds.labeled_y())?;
    let point = u + scores.correction(r, ds.n(), ds.m());
    finish_estimate(ds, kernel, point, &scores, opts)
}

fn finish_estimate(
    ds: &SemiDataset,
    kernel: &KernelSpec,
    point: f64,
    scores: &AssistantScores,
    opts: &EstimateOptions,
) -> Result<Estimate> {
    let lh = lambda_hat(ds, kernel, &scores.labeled, opts.ell1_var)?;
    let (ci_low, ci_high) = confidence_interval(point, lh.lambda, ds.n(), opts.alpha)?;
    let ell1 = ell1_values(kernel, ds.labeled_y(), opts.ell1_var)?;
    let pairs: Vec<(f64, f64)> = ell1
        .iter()
        .zip(&scores.labeled)
        .map(|(&a, &b)| (a, b))
        .collect();
    let improvement = improvement_ratio(&pairs).ok();
    Ok(Estimate {
        point,
        lambda_hat: lh.lambda,
        ci_low,
        ci_high,
        alpha: opts.alpha,
        diagnostics: Diagnostics {
            sigma2_hat: lh.sigma2_hat,
            tau_hat: lh.tau_hat,
            clamped: lh.clamped,
            improvement_ratio: improvement,
            ridged_fit: false,
        },
    })
}

/// Asymptotic variance of the cross-fit estimator:
/// `r^2 Var(ell1) + (r^2 m / (n+m)) * (Var(f) - 2 Cov(f, psi1))`.
pub fn lambda_nm_f(n: usize, m: usize, r: usize, moments: &MomentSummary) -> f64 {
    let r2 = (r * r) as f64;
    r2 * moments.var_ell1
        + r2 * m as f64 / (n + m) as f64 * (moments.var_f - 2.0 * moments.cov_f_psi1)
}

/// Jackknife-based estimate of the variance scale.
#[derive(Debug, Clone, Copy)]
pub struct LambdaHat {
    pub lambda: f64,
    pub sigma2_hat: f64,
    pub tau_hat: f64,
    pub clamped: bool,
}

/// `Lambda_hat = r^2 sigma2_hat + r^2 m tau_hat / (n+m)` where `sigma2_hat`
/// is the jackknife variance of the first projection and `tau_hat` the
/// centered mean square of `f_hat(X_i) - ell1_hat(Y_i)` minus `sigma2_hat`.
/// The result is floored at [`LAMBDA_FLOOR`] with a diagnostic flag.
pub fn lambda_hat(
    ds: &SemiDataset,
    kernel: &KernelSpec,
    labeled_scores: &[f64],
    ell1_mode: Ell1Mode,
) -> Result<LambdaHat> {
    let n = ds.n();
    if labeled_scores.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: labeled_scores.len() });
    }
    let r = kernel.order();
    let r2 = (r * r) as f64;
    let sigma2 = jackknife_sigma2(kernel, ds.labeled_y())?;
    let ell1 = ell1_values(kernel, ds.labeled_y(), ell1_mode)?;
    let diffs: Vec<f64> = labeled_scores
        .iter()
        .zip(&ell1)
        .map(|(&f, &l)| f - l)
        .collect();
    let tau = population_variance(&diffs) - sigma2;
    let raw = r2 * sigma2 + r2 * ds.m() as f64 / (n + ds.m()) as f64 * tau;
    let clamped = raw < LAMBDA_FLOOR;
    Ok(LambdaHat {
        lambda: if clamped { LAMBDA_FLOOR } else { raw },
        sigma2_hat: sigma2,
        tau_hat: tau,
        clamped,
    })
}

/// Empirical `Cov(ell1_hat(Y), f_hat(X)) / Var(f_hat(X))` over sample pairs
/// `(ell1_hat(Y_i), f_hat(X_i))`. Values above 1/2 indicate the assistant
/// reduces the asymptotic variance.
pub fn improvement_ratio(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyData("improvement ratio needs sample pairs"));
    }
    let ell1: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let fhat: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let var_f = population_variance(&fhat);
    if var_f <= 0.0 {
        return Err(Error::InvalidParam(
            "assistant scores have zero empirical variance".into(),
        ));
    }
    Ok(population_covariance(&ell1, &fhat) / var_f)
}

/// Optimal control-variate scaling for a single assistant; identical formula
/// to [`improvement_ratio`], named for its use (scale `f_hat` by the result
/// before applying the correction display).
pub fn control_variate_coef(pairs: &[(f64, f64)]) -> Result<f64> {
    improvement_ratio(pairs)
}

/// Optimal aggregation coefficients over `M` assistant functions: solves the
/// empirical normal equations `Cov(f, f) c = Cov(ell1, f)`. `scores` has one
/// row per labeled point and one column per assistant. Returns the
/// coefficient vector and a flag set when a singular covariance forced a
/// ridge fallback.
pub fn aggregation_coef(ell1: &[f64], scores: &Matrix) -> Result<(Vec<f64>, bool)> {
    let n = scores.nrows();
    let m_fns = scores.ncols();
    if m_fns == 0 {
        return Err(Error::EmptyData("aggregation needs at least one assistant"));
    }
    if ell1.len() != n || n == 0 {
        return Err(Error::DimensionMismatch { expected: n.max(1), got: ell1.len() });
    }
    let col_means: Vec<f64> = (0..m_fns)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| scores.row(i)[j]).collect();
            mean(&col)
        })
        .collect();
    let ell1_mean = mean(ell1);
    let mut cov = DMatrix::zeros(m_fns, m_fns);
    for a in 0..m_fns {
        for b in a..m_fns {
            let mut acc = KahanSum::new();
            for i in 0..n {
                acc.add((scores.row(i)[a] - col_means[a]) * (scores.row(i)[b] - col_means[b]));
            }
            let v = acc.total() / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let mut rhs = DVector::zeros(m_fns);
    for a in 0..m_fns {
        let mut acc = KahanSum::new();
        for i in 0..n {
            acc.add((scores.row(i)[a] - col_means[a]) * (ell1[i] - ell1_mean));
        }
        rhs[a] = acc.total() / n as f64;
    }
    if let Some(chol) = cov.clone().cholesky() {
        let c = chol.solve(&rhs);
        // Cholesky of a barely-PSD matrix can succeed with garbage scale;
        // verify the residual before accepting.
        let resid = (&cov * &c - &rhs).norm();
        if resid <= 1e-8 * (rhs.norm() + 1.0) {
            return Ok((c.iter().copied().collect(), false));
        }
    }
    let trace: f64 = (0..m_fns).map(|i| cov[(i, i)]).sum();
    let ridge = (1e-8 * trace / m_fns as f64).max(f64::MIN_POSITIVE);
    for i in 0..m_fns {
        cov[(i, i)] += ridge;
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Singular("assistant covariance not PD even with ridge".into()))?;
    Ok((chol.solve(&rhs).iter().copied().collect(), true))
}

/// Two-sided normal confidence interval `point -+ z_{1-alpha/2} sqrt(lambda/n)`.
pub fn confidence_interval(point: f64, lambda: f64, n: usize, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParam(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidParam(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    let z = z_quantile(1.0 - alpha / 2.0)?;
    let half = z * (lambda / n as f64).sqrt();
    Ok((point - half, point + half))
}

/// Two-sided p-value of a standardized statistic.
pub fn normal_p_value(standardized: f64) -> f64 {
    2.0 * (1.0 - phi(standardized.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use approx::assert_abs_diff_eq;

    fn dataset(n: usize, m: usize, seed: u64) -> SemiDataset {
        let mut s = Stream::new(seed);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![s.next_normal()]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x[0] + 0.5 * s.next_normal()).collect();
        let us: Vec<Vec<f64>> = (0..m).map(|_| vec![s.next_normal()]).collect();
        SemiDataset::from_scalar(&xs, &ys, &us).unwrap()
    }

    #[test]
    fn u_oracle_examples() {
        let mean_kernel = KernelSpec::mean();
        // m = 0: corrections cancel for any f.
        let ds = dataset(6, 0, 1);
        let u = u_statistic(&mean_kernel, ds.labeled_y()).unwrap();
        let v = u_oracle(&ds, &mean_kernel, &|x| 3.0 * x[0] + 1.0).unwrap();
        assert_abs_diff_eq!(v, u, epsilon = 1e-12);

        // constant f: location invariance.
        let ds = dataset(6, 9, 2);
        let u = u_statistic(&mean_kernel, ds.labeled_y()).unwrap();
        let v = u_oracle(&ds, &mean_kernel, &|_| 42.0).unwrap();
        assert_abs_diff_eq!(v, u, epsilon = 1e-12);

        // hand computation: labeled {(x=1,y=2)}, unlabeled {x=3}, f = id.
        let ds = SemiDataset::from_scalar(&[vec![1.0]], &[2.0], &[vec![3.0]]).unwrap();
        let v = u_oracle(&ds, &mean_kernel, &|x| x[0]).unwrap();
        assert_abs_diff_eq!(v, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn lambda_nm_f_examples() {
        let moments = MomentSummary {
            var_ell1: 2.0,
            var_f: 0.7,
            cov_f_psi1: 0.7,
            sigma1_sq: 1.3,
            sigma2_sq: 0.7,
        };
        let r = 2;
        // m = 0: second term vanishes.
        assert_eq!(lambda_nm_f(10, 0, r, &moments), 4.0 * 2.0);
        // f = psi1: r^2 sigma1^2 + r^2 n/(n+m) sigma2^2.
        let n = 100;
        let m = 300;
        let want = 4.0 * 1.3 + 4.0 * n as f64 / (n + m) as f64 * 0.7;
        assert_abs_diff_eq!(lambda_nm_f(n, m, r, &moments), want, epsilon = 1e-12);
        // zero assistant.
        let zero = MomentSummary { var_f: 0.0, cov_f_psi1: 0.0, ..moments };
        assert_eq!(lambda_nm_f(n, m, r, &zero), 4.0 * 2.0);
    }

    #[test]
    fn lambda_hat_collapses_and_clamps() {
        let kernel = KernelSpec::variance();
        let ds = dataset(30, 0, 3);
        let scores = vec![0.0; 30];
        let lh = lambda_hat(&ds, &kernel, &scores, Ell1Mode::Auto).unwrap();
        let sigma2 = jackknife_sigma2(&kernel, ds.labeled_y()).unwrap();
        assert_abs_diff_eq!(lh.lambda, 4.0 * sigma2, epsilon = 1e-12);

        // f_hat identical to ell1_hat: Lambda = r^2 sigma2 n/(n+m).
        let ds = dataset(30, 60, 4);
        let ell1 = ell1_values(&kernel, ds.labeled_y(), Ell1Mode::Auto).unwrap();
        let lh = lambda_hat(&ds, &kernel, &ell1, Ell1Mode::Auto).unwrap();
        let sigma2 = jackknife_sigma2(&kernel, ds.labeled_y()).unwrap();
        assert_abs_diff_eq!(lh.tau_hat, -sigma2, epsilon = 1e-12);
        assert_abs_diff_eq!(lh.lambda, 4.0 * sigma2 * 30.0 / 90.0, epsilon = 1e-10);

        // Constant responses: sigma2 = 0, tau = 0, raw lambda = 0 -> clamped.
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let ys = vec![1.0; 10];
        let us: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let flat = SemiDataset::from_scalar(&xs, &ys, &us).unwrap();
        let lh = lambda_hat(&flat, &kernel, &vec![0.0; 10], Ell1Mode::Auto).unwrap();
        assert!(lh.clamped);
        assert_eq!(lh.lambda, LAMBDA_FLOOR);
    }

    #[test]
    fn cross_and_plug_collapse_to_u() {
        let kernel = KernelSpec::variance();
        let opts = EstimateOptions::default();
        // m = 0.
        let ds = dataset(24, 0, 6);
        let u = u_statistic(&kernel, ds.labeled_y()).unwrap();
        let c = u_cross(&ds, &kernel, &RegressorSpec::Knn { k: 3 }, &opts).unwrap();
        assert_abs_diff_eq!(c.point, u, epsilon = 1e-10);
        let p = u_plug(&ds, &kernel, &RegressorSpec::Knn { k: 3 }, &opts).unwrap();
        assert_abs_diff_eq!(p.point, u, epsilon = 1e-10);

        // Constant assistant: a 1-bin partition predicts one constant
        // everywhere, so the correction cancels even with m > 0 on each fold.
        let ds = dataset(24, 18, 7);
        let u = u_statistic(&kernel, ds.labeled_y()).unwrap();
        let p = u_plug(
            &ds,
            &kernel,
            &RegressorSpec::Partition { bins_per_dim: 1, range: None },
            &opts,
        )
        .unwrap();
        assert_abs_diff_eq!(p.point, u, epsilon = 1e-10);
    }

    #[test]
    fn u_single_with_constant_model_equals_u() {
        let kernel = KernelSpec::variance();
        let opts = EstimateOptions::default();
        let ds = dataset(20, 15, 8);
        let u = u_statistic(&kernel, ds.labeled_y()).unwrap();
        let aux = dataset(10, 0, 9);
        let model = crate::regress::fit(
            &RegressorSpec::Partition { bins_per_dim: 1, range: None },
            aux.labeled_x(),
            &aux.labeled_y().column0(),
        )
        .unwrap();
        let e = u_single(&ds, &kernel, &model, &opts).unwrap();
        assert_abs_diff_eq!(e.point, u, epsilon = 1e-10);
    }

    #[test]
    fn u_cross_hand_unrolled_small_instance() {
        // n=4, m=2, mean kernel, knn(k=1). Analytic ell1 for the mean kernel
        // is the identity, so fold models are 1-NN regressions of y on x.
        let xs = vec![vec![0.0], vec![1.0], vec![4.0], vec![5.0]];
        let ys = vec![1.0, 2.0, 10.0, 11.0];
        let us = vec![vec![0.5], vec![4.5]];
        let ds = SemiDataset::from_scalar(&xs, &ys, &us).unwrap();
        let kernel = KernelSpec::mean();
        let e = u_cross(&ds, &kernel, &RegressorSpec::Knn { k: 1 }, &EstimateOptions::default())
            .unwrap();
        // fold1 = rows {0,1}, fold2 = rows {2,3}; fold1_unl = {0.5}, fold2_unl = {4.5}.
        // f1 = 1NN on {(0,1),(1,2)}; f2 = 1NN on {(4,10),(5,11)}.
        // scores: labeled: f2(0)=10, f2(1)=10, f1(4)=2, f1(5)=2;
        // unlabeled: f2(0.5)=10, f1(4.5)=2.
        let u = (1.0 + 2.0 + 10.0 + 11.0) / 4.0;
        let sum_lab = 10.0 + 10.0 + 2.0 + 2.0;
        let sum_all = sum_lab + 10.0 + 2.0;
        let want = u - sum_lab / 4.0 + sum_all / 6.0;
        assert_abs_diff_eq!(e.point, want, epsilon = 1e-12);
    }

    #[test]
    fn u_plug_hand_unrolled_ols() {
        // n=3, m=1, mean kernel, ols on [1, x].
        let xs = vec![vec![0.0], vec![1.0], vec![2.0]];
        let ys = vec![0.0, 1.0, 4.0];
        let us = vec![vec![3.0]];
        let ds = SemiDataset::from_scalar(&xs, &ys, &us).unwrap();
        let kernel = KernelSpec::mean();
        let e = u_plug(&ds, &kernel, &RegressorSpec::Ols, &EstimateOptions::default()).unwrap();
        // x_bar = 1, y_bar = 5/3, Sxx = 2, Sxy = 4 -> slope 2, intercept -1/3.
        let slope = 2.0;
        let intercept = 5.0 / 3.0 - slope;
        let f = |x: f64| intercept + slope * x;
        let u = 5.0 / 3.0;
        let sum_lab = f(0.0) + f(1.0) + f(2.0);
        let sum_all = sum_lab + f(3.0);
        let want = u - sum_lab / 3.0 + sum_all / 4.0;
        assert_abs_diff_eq!(e.point, want, epsilon = 1e-10);
    }

    #[test]
    fn shift_invariance_of_scores() {
        let ds = dataset(12, 10, 11);
        let scores = AssistantScores {
            labeled: (0..12).map(|i| i as f64).collect(),
            unlabeled: (0..10).map(|i| -(i as f64)).collect(),
        };
        let shifted = AssistantScores {
            labeled: scores.labeled.iter().map(|v| v + 17.5).collect(),
            unlabeled: scores.unlabeled.iter().map(|v| v + 17.5).collect(),
        };
        let a = scores.correction(2, ds.n(), ds.m());
        let b = shifted.correction(2, ds.n(), ds.m());
        assert_abs_diff_eq!(a, b, epsilon = 1e-10);
    }

    #[test]
    fn improvement_and_control_variate_examples() {
        let pairs: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, i as f64)).collect();
        assert_abs_diff_eq!(improvement_ratio(&pairs).unwrap(), 1.0, epsilon = 1e-12);
        let doubled: Vec<(f64, f64)> = pairs.iter().map(|&(a, _)| (a, 2.0 * a)).collect();
        assert_abs_diff_eq!(improvement_ratio(&doubled).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(control_variate_coef(&doubled).unwrap(), 0.5, epsilon = 1e-12);
        let constant: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, 3.0)).collect();
        assert!(improvement_ratio(&constant).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let mut s = Stream::new(13);
        let n = 400;
        let f1: Vec<f64> = (0..n).map(|_| s.next_normal()).collect();
        let f2: Vec<f64> = (0..n).map(|_| s.next_normal()).collect();
        let ell1: Vec<f64> = f1
            .iter()
            .zip(&f2)
            .map(|(a, b)| 2.0 * a + 3.0 * b + 0.1 * s.next_normal())
            .collect();

        // M = 1 reduces to the control-variate coefficient.
        let single =
            Matrix::from_rows(&f1.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap();
        let (c, ridged) = aggregation_coef(&ell1, &single).unwrap();
        assert!(!ridged);
        let pairs: Vec<(f64, f64)> = ell1.iter().zip(&f1).map(|(&a, &b)| (a, b)).collect();
        assert_abs_diff_eq!(c[0], control_variate_coef(&pairs).unwrap(), epsilon = 1e-10);

        // Duplicated columns are singular: ridge fallback flagged.
        let dup =
            Matrix::from_rows(&f1.iter().map(|&v| vec![v, v]).collect::<Vec<_>>()).unwrap();
        let (_, ridged) = aggregation_coef(&ell1, &dup).unwrap();
        assert!(ridged);

        // Near-orthogonal pair recovers the generating coefficients.
        let both = Matrix::from_rows(
            &f1.iter().zip(&f2).map(|(&a, &b)| vec![a, b]).collect::<Vec<_>>(),
        )
        .unwrap();
        let (c2, _) = aggregation_coef(&ell1, &both).unwrap();
        assert!((c2[0] - 2.0).abs() < 0.1, "{c2:?}");
        assert!((c2[1] - 3.0).abs() < 0.1, "{c2:?}");
    }

    #[test]
    fn aggregation_orthogonal_matches_univariate() {
        // Exactly orthogonal centered columns: coefficients must equal the
        // univariate control-variate coefficients (diagonal system).
        let f1 = vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let f2 = vec![1.0, 1.0, 0.0, 0.0, -1.0, -1.0];
        let dot: f64 = f1.iter().zip(&f2).map(|(a, b)| a * b).sum();
        assert_eq!(dot, 0.0);
        let ell1: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a + 2.0 * b).collect();
        let both = Matrix::from_rows(
            &f1.iter().zip(&f2).map(|(&a, &b)| vec![a, b]).collect::<Vec<_>>(),
        )
        .unwrap();
        let (c, _) = aggregation_coef(&ell1, &both).unwrap();
        let p1: Vec<(f64, f64)> = ell1.iter().zip(&f1).map(|(&a, &b)| (a, b)).collect();
        let p2: Vec<(f64, f64)> = ell1.iter().zip(&f2).map(|(&a, &b)| (a, b)).collect();
        assert_abs_diff_eq!(c[0], control_variate_coef(&p1).unwrap(), epsilon = 1e-10);
        assert_abs_diff_eq!(c[1], control_variate_coef(&p2).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn confidence_interval_examples() {
        let (lo, hi) = confidence_interval(1.0, 0.0, 50, 0.05).unwrap();
        assert_eq!((lo, hi), (1.0, 1.0));
        let (lo, hi) = confidence_interval(0.0, 1.0, 100, 0.05).unwrap();
        assert_abs_diff_eq!(hi, 0.19599639845400543, epsilon = 1e-9);
        assert_abs_diff_eq!(lo, -hi, epsilon = 1e-15);
        let (_, hi) = confidence_interval(0.0, 1.0, 1, 0.5).unwrap();
        assert_abs_diff_eq!(hi, 0.6744897501960817, epsilon = 1e-9);
        assert!(confidence_interval(0.0, 1.0, 10, 0.0).is_err());
        assert!(confidence_interval(0.0, 1.0, 10, 1.0).is_err());
    }

    #[test]
    fn estimate_invariants_hold() {
        let kernel = KernelSpec::variance();
        let ds = dataset(40, 80, 21);
        let e = u_cross(&ds, &kernel, &RegressorSpec::Knn { k: 5 }, &EstimateOptions::default())
            .unwrap();
        assert!(e.ci_low <= e.point && e.point <= e.ci_high);
        let z = z_quantile(0.975).unwrap();
        let width = 2.0 * z * (e.lambda_hat / 40.0).sqrt();
        assert_abs_diff_eq!(e.ci_high - e.ci_low, width, epsilon = 1e-12);
        assert!(e.lambda_hat >= LAMBDA_FLOOR);
    }
}
