//! Classical and semi-supervised Kendall and Wilcoxon rank tests.
//!
//! The classical statistics are U-statistics of the `kendall` / `wilcoxon`
//! kernels with their textbook null normalizations (`Var(ell1) = 1/9` and
//! `1/12` under the null, giving scales 4/9 and 1/3). The semi-supervised
//! versions standardize the cross-fit (or plug-in) point estimate by
//!
//! ```text
//! Lambda_hat = r^2 V_null + (4m/(n+m)) * { centered mean square of
//!              (f_hat(X_i) - ell1_hat(Y_i)) - V_null }
//! ```
//!
//! with `V_null` the null first-projection variance, `ell1_hat` the
//! ECDF-based estimate computed on the full labeled sample, and `f_hat` the
//! same assistant scores used by the point estimate.
//!
//! Ties contribute zero to both kernels (continuous-data theory); a
//! tie-fraction diagnostic is reported. The plug-in variants reproduce the
//! anti-conservative small-sample behavior of plug-in fitting; that is a
//! property of the method, not a defect of the implementation.

use crate::data::{Matrix, SemiDataset};
use crate::estimators::{
    normal_p_value, u_cross_point, u_plug_point, AssistantScores, LAMBDA_FLOOR,
};
use crate::kernels::{ell1_values, Ell1Mode, KernelSpec};
use crate::numerics::{population_variance, z_quantile};
use crate::regress::RegressorSpec;
use crate::ustat::u_statistic;
use crate::{Error, Result};

/// Outcome of a calibrated two-sided test.
#[derive(Debug, Clone)]
pub struct TestResult {
    /// Standardized statistic compared against `z_{1-alpha/2}`.
    pub statistic: f64,
    /// Variance scale used in the standardization.
    pub lambda_hat: f64,
    pub reject: bool,
    pub alpha: f64,
    pub p_value: f64,
    pub method: String,
    /// Set when the variance estimate was floored.
    pub clamped: bool,
    /// Fraction of pairs contributing zero through ties.
    pub tie_fraction: f64,
}

fn finish(
    method: &str,
    standardized: f64,
    lambda: f64,
    clamped: bool,
    alpha: f64,
    tie_fraction: f64,
) -> Result<TestResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParam(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    let z = z_quantile(1.0 - alpha / 2.0)?;
    let p_value = normal_p_value(standardized);
    Ok(TestResult {
        statistic: standardized,
        lambda_hat: lambda,
        reject: standardized > z,
        alpha,
        p_value,
        method: method.into(),
        clamped,
        tie_fraction,
    })
}

/// Fraction of unordered pairs (i, j) tied in either coordinate of a
/// bivariate sample (sorted run-length counting).
fn kendall_tie_fraction(sample: &Matrix) -> f64 {
    let n = sample.nrows();
    if n < 2 {
        return 0.0;
    }
    let tied_in = |extract: &dyn Fn(&[f64]) -> f64| -> u64 {
        let mut v: Vec<f64> = sample.iter_rows().map(extract).collect();
        v.sort_by(f64::total_cmp);
        run_tie_pairs(&v)
    };
    let t_v = tied_in(&|r| r[0]);
    let t_w = tied_in(&|r| r[1]);
    // Pairs tied in both coordinates, counted once.
    let mut pairs: Vec<(f64, f64)> = sample.iter_rows().map(|r| (r[0], r[1])).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut t_vw = 0u64;
    let mut run = 1u64;
    for i in 1..pairs.len() {
        if pairs[i] == pairs[i - 1] {
            run += 1;
        } else {
            t_vw += run * (run - 1) / 2;
            run = 1;
        }
    }
    t_vw += run * (run - 1) / 2;
    let total = n as u64 * (n as u64 - 1) / 2;
    (t_v + t_w - t_vw) as f64 / total as f64
}

fn run_tie_pairs(sorted: &[f64]) -> u64 {
    let mut ties = 0u64;
    let mut run = 1u64;
    for i in 1..sorted.len() {
        if sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            ties += run * (run - 1) / 2;
            run = 1;
        }
    }
    ties + run * (run - 1) / 2
}

/// Fraction of unordered pairs with `y_i + y_j == 0` exactly.
fn wilcoxon_tie_fraction(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let mut sorted = ys.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut count = 0u64;
    for (i, &y) in sorted.iter().enumerate() {
        // Pairs (i, j), j > i, with y_j == -y; binary search the run.
        let lo = sorted.partition_point(|&v| v < -y);
        let hi = sorted.partition_point(|&v| v <= -y);
        let run = (lo.max(i + 1)..hi.max(i + 1)).len();
        count += run as u64;
    }
    count as f64 / (n as u64 * (n as u64 - 1) / 2) as f64
}

/// Classical Kendall independence test: `tau` is the U-statistic of the
/// kendall kernel and the null gives `sqrt(n) tau -> N(0, 4/9)`.
pub fn kendall_classical(sample: &Matrix, alpha: f64) -> Result<TestResult> {
    if sample.nrows() < 2 {
        return Err(Error::SampleTooSmall { need: 2, got: sample.nrows() });
    }
    let kernel = KernelSpec::kendall();
    let tau = u_statistic(&kernel, sample)?;
    let n = sample.nrows() as f64;
    let lambda: f64 = 4.0 / 9.0;
    let standardized = n.sqrt() * tau.abs() / lambda.sqrt();
    finish(
        "kendall",
        standardized,
        lambda,
        false,
        alpha,
        kendall_tie_fraction(sample),
    )
}

fn kendall_ss_impl(
    ds: &SemiDataset,
    scores: &AssistantScores,
    point: f64,
    method: &str,
    alpha: f64,
) -> Result<TestResult> {
    let kernel = KernelSpec::kendall();
    let ell1 = ell1_values(&kernel, ds.labeled_y(), Ell1Mode::Analytic)?;
    let diffs: Vec<f64> = scores
        .labeled
        .iter()
        .zip(&ell1)
        .map(|(&f, &l)| f - l)
        .collect();
    let n = ds.n() as f64;
    let m = ds.m() as f64;
    let raw = 4.0 / 9.0 + 4.0 * m / (n + m) * (population_variance(&diffs) - 1.0 / 9.0);
    let clamped = raw < LAMBDA_FLOOR;
    let lambda = if clamped { LAMBDA_FLOOR } else { raw };
    let standardized = n.sqrt() * point.abs() / lambda.sqrt();
    finish(
        method,
        standardized,
        lambda,
        clamped,
        alpha,
        kendall_tie_fraction(ds.labeled_y()),
    )
}

fn require_bivariate(ds: &SemiDataset) -> Result<()> {
    if ds.q() != 2 {
        return Err(Error::ArityMismatch {
            kernel: "kendall".into(),
            expected: 2,
            got: ds.q(),
        });
    }
    Ok(())
}

/// Semi-supervised Kendall test built on the cross-fit estimator.
pub fn kendall_ss(ds: &SemiDataset, spec: &RegressorSpec, alpha: f64) -> Result<TestResult> {
    require_bivariate(ds)?;
    let kernel = KernelSpec::kendall();
    let (point, scores, _) = u_cross_point(ds, &kernel, spec, Ell1Mode::Auto)?;
    kendall_ss_impl(ds, &scores, point, "kendall-ss", alpha)
}

/// Plug-in variant of the semi-supervised Kendall test.
pub fn kendall_plug(ds: &SemiDataset, spec: &RegressorSpec, alpha: f64) -> Result<TestResult> {
    require_bivariate(ds)?;
    let kernel = KernelSpec::kendall();
    let (point, scores, _) = u_plug_point(ds, &kernel, spec, Ell1Mode::Auto)?;
    kendall_ss_impl(ds, &scores, point, "kendall-plug", alpha)
}

/// Classical Wilcoxon-type test for `H0: P(Y1 + Y2 > 0) = 1/2` based on the
/// pair-sum U-statistic, standardized by the null scale `1/3`.
pub fn wilcoxon_classical(ys: &[f64], alpha: f64) -> Result<TestResult> {
    if ys.len() < 2 {
        return Err(Error::SampleTooSmall { need: 2, got: ys.len() });
    }
    let kernel = KernelSpec::wilcoxon();
    let sample = Matrix::from_column(ys);
    let u1 = u_statistic(&kernel, &sample)?;
    let n = ys.len() as f64;
    let lambda: f64 = 1.0 / 3.0;
    let standardized = n.sqrt() * (u1 - 0.5).abs() / lambda.sqrt();
    finish(
        "wilcoxon",
        standardized,
        lambda,
        false,
        alpha,
        wilcoxon_tie_fraction(ys),
    )
}

fn wilcoxon_ss_impl(
    ds: &SemiDataset,
    scores: &AssistantScores,
    point: f64,
    method: &str,
    alpha: f64,
) -> Result<TestResult> {
    let kernel = KernelSpec::wilcoxon();
    let ell1 = ell1_values(&kernel, ds.labeled_y(), Ell1Mode::Analytic)?;
    let diffs: Vec<f64> = scores
        .labeled
        .iter()
        .zip(&ell1)
        .map(|(&f, &l)| f - l)
        .collect();
    let n = ds.n() as f64;
    let m = ds.m() as f64;
    let raw = 1.0 / 3.0 + 4.0 * m / (n + m) * (population_variance(&diffs) - 1.0 / 12.0);
    let clamped = raw < LAMBDA_FLOOR;
    let lambda = if clamped { LAMBDA_FLOOR } else { raw };
    let standardized = n.sqrt() * (point - 0.5).abs() / lambda.sqrt();
    finish(
        method,
        standardized,
        lambda,
        clamped,
        alpha,
        wilcoxon_tie_fraction(&ds.labeled_y().column0()),
    )
}

fn require_scalar(ds: &SemiDataset) -> Result<()> {
    if ds.q() != 1 {
        return Err(Error::ArityMismatch {
            kernel: "wilcoxon".into(),
            expected: 1,
            got: ds.q(),
        });
    }
    Ok(())
}

/// Semi-supervised Wilcoxon test built on the cross-fit estimator.
pub fn wilcoxon_ss(ds: &SemiDataset, spec: &RegressorSpec, alpha: f64) -> Result<TestResult> {
    require_scalar(ds)?;
    let kernel = KernelSpec::wilcoxon();
    let (point, scores, _) = u_cross_point(ds, &kernel, spec, Ell1Mode::Auto)?;
    wilcoxon_ss_impl(ds, &scores, point, "wilcoxon-ss", alpha)
}

/// Plug-in variant of the semi-supervised Wilcoxon test.
pub fn wilcoxon_plug(ds: &SemiDataset, spec: &RegressorSpec, alpha: f64) -> Result<TestResult> {
    require_scalar(ds)?;
    let kernel = KernelSpec::wilcoxon();
    let (point, scores, _) = u_plug_point(ds, &kernel, spec, Ell1Mode::Auto)?;
    wilcoxon_ss_impl(ds, &scores, point, "wilcoxon-plug", alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::phi;
    use crate::rng::Stream;
    use approx::assert_abs_diff_eq;

    fn kendall_dataset(n: usize, m: usize, rho: f64, seed: u64) -> SemiDataset {
        let mut s = Stream::new(seed);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        let mut us = Vec::with_capacity(m);
        for i in 0..n + m {
            let z1 = s.next_normal();
            let z2 = s.next_normal();
            let x = vec![z1, rho * z1 + (1.0 - rho * rho).sqrt() * z2];
            if i < n {
                ys.push(vec![
                    x[0] + 0.05 * s.next_normal(),
                    x[1] + 0.05 * s.next_normal(),
                ]);
                xs.push(x);
            } else {
                us.push(x);
            }
        }
        SemiDataset::new(
            Matrix::from_rows(&xs).unwrap(),
            Matrix::from_rows(&ys).unwrap(),
            if m == 0 {
                Matrix::empty(2)
            } else {
                Matrix::from_rows(&us).unwrap()
            },
        )
        .unwrap()
    }

    #[test]
    fn kendall_classical_examples() {
        // Perfectly concordant sample of 50: tau = 1, strong rejection.
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, i as f64]).collect();
        let r = kendall_classical(&Matrix::from_rows(&rows).unwrap(), 0.05).unwrap();
        assert!(r.reject);
        assert_abs_diff_eq!(
            r.statistic,
            3.0 * (50.0f64).sqrt() / 2.0,
            epsilon = 1e-12
        );

        // Single discordant pair: tau = -1.
        let two = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let r = kendall_classical(&two, 0.05).unwrap();
        assert_abs_diff_eq!(
            r.statistic,
            3.0 * (2.0f64).sqrt() / 2.0,
            epsilon = 1e-12
        );
        assert!(kendall_classical(&Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(), 0.05).is_err());
    }

    #[test]
    fn result_invariants_are_consistent() {
        let mut s = Stream::new(3);
        for rep in 0..50 {
            let n = 10 + (s.next_u64() % 40) as usize;
            let ds = kendall_dataset(n, 0, 0.3, 500 + rep);
            let r = kendall_classical(ds.labeled_y(), 0.05).unwrap();
            let z = z_quantile(1.0 - 0.05 / 2.0).unwrap();
            assert_eq!(r.reject, r.p_value < 0.05);
            assert_eq!(r.reject, r.statistic > z);
            assert_abs_diff_eq!(
                r.p_value,
                2.0 * (1.0 - phi(r.statistic.abs())),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn kendall_ss_m_zero_reduces_to_classical_normalization() {
        let ds = kendall_dataset(24, 0, 0.0, 8);
        let r = kendall_ss(&ds, &RegressorSpec::Knn { k: 3 }, 0.05).unwrap();
        assert_abs_diff_eq!(r.lambda_hat, 4.0 / 9.0, epsilon = 1e-12);
        // Point equals tau when m = 0, so the statistic matches classical.
        let c = kendall_classical(ds.labeled_y(), 0.05).unwrap();
        assert_abs_diff_eq!(r.statistic, c.statistic, epsilon = 1e-9);
    }

    #[test]
    fn kendall_ss_perfect_assistant_shrinks_lambda() {
        // If f_hat reproduces ell1_hat pointwise the braces give -1/9 and
        // Lambda = (4/9) * n/(n+m). Exercise the display directly.
        let ds = kendall_dataset(30, 60, 0.0, 9);
        let kernel = KernelSpec::kendall();
        let ell1 = ell1_values(&kernel, ds.labeled_y(), Ell1Mode::Analytic).unwrap();
        let scores = AssistantScores { labeled: ell1, unlabeled: vec![0.0; 60] };
        let r = kendall_ss_impl(&ds, &scores, 0.1, "kendall-ss", 0.05).unwrap();
        assert_abs_diff_eq!(
            r.lambda_hat,
            4.0 / 9.0 * 30.0 / 90.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn kendall_requires_bivariate_response() {
        let mut s = Stream::new(10);
        let xs: Vec<Vec<f64>> = (0..10).map(|_| vec![s.next_normal()]).collect();
        let ys: Vec<f64> = (0..10).map(|_| s.next_normal()).collect();
        let ds = SemiDataset::from_scalar(&xs, &ys, &[]).unwrap();
        assert!(kendall_ss(&ds, &RegressorSpec::Knn { k: 2 }, 0.05).is_err());
    }

    #[test]
    fn wilcoxon_classical_examples() {
        // All-positive sample: U1 = 1, strong rejection.
        let ys: Vec<f64> = (1..=40).map(|i| i as f64).collect();
        let r = wilcoxon_classical(&ys, 0.05).unwrap();
        assert!(r.reject);
        assert_abs_diff_eq!(
            r.statistic,
            (40.0f64).sqrt() * 0.5 / (1.0f64 / 3.0).sqrt(),
            epsilon = 1e-12
        );

        // Antisymmetric pair {-a, a}: the single pair sums to zero, U1 = 0.
        let r = wilcoxon_classical(&[-2.0, 2.0], 0.05).unwrap();
        assert_abs_diff_eq!(
            r.statistic,
            (2.0f64).sqrt() * 0.5 / (1.0f64 / 3.0).sqrt(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(r.tie_fraction, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn wilcoxon_ss_display_collapses() {
        let mut s = Stream::new(12);
        let n = 20;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![s.next_normal()]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x[0] + 0.1 * s.next_normal()).collect();
        let ds = SemiDataset::from_scalar(&xs, &ys, &[]).unwrap();
        let r = wilcoxon_ss(&ds, &RegressorSpec::Knn { k: 3 }, 0.05).unwrap();
        assert_abs_diff_eq!(r.lambda_hat, 1.0 / 3.0, epsilon = 1e-12);

        // Perfect assistant: Lambda = (1/3) n/(n+m).
        let us: Vec<Vec<f64>> = (0..40).map(|_| vec![s.next_normal()]).collect();
        let ds = SemiDataset::from_scalar(&xs, &ys, &us).unwrap();
        let kernel = KernelSpec::wilcoxon();
        let ell1 = ell1_values(&kernel, ds.labeled_y(), Ell1Mode::Analytic).unwrap();
        let scores = AssistantScores { labeled: ell1, unlabeled: vec![0.0; 40] };
        let r = wilcoxon_ss_impl(&ds, &scores, 0.5, "wilcoxon-ss", 0.05).unwrap();
        assert_abs_diff_eq!(r.lambda_hat, 1.0 / 3.0 * 20.0 / 60.0, epsilon = 1e-12);
    }

    #[test]
    fn kendall_monotone_invariance() {
        // Strictly increasing transforms of each coordinate leave the
        // classical statistic unchanged (only signs of differences enter).
        let ds = kendall_dataset(40, 0, 0.4, 20);
        let r1 = kendall_classical(ds.labeled_y(), 0.05).unwrap();
        let transformed: Vec<Vec<f64>> = ds
            .labeled_y()
            .iter_rows()
            .map(|r| vec![r[0].exp(), r[1].powi(3)])
            .collect();
        let r2 = kendall_classical(&Matrix::from_rows(&transformed).unwrap(), 0.05).unwrap();
        assert_abs_diff_eq!(r1.statistic, r2.statistic, epsilon = 1e-12);
    }

    #[test]
    fn tie_fractions_count_correctly() {
        // v ties: (1,1) pair; w ties: none; joint: none.
        let sample = Matrix::from_rows(&[
            vec![1.0, 5.0],
            vec![1.0, 6.0],
            vec![2.0, 7.0],
        ])
        .unwrap();
        assert_abs_diff_eq!(kendall_tie_fraction(&sample), 1.0 / 3.0, epsilon = 1e-12);

        // wilcoxon: pairs summing to zero among {-1, 1, 1, 3}: (-1,1) twice.
        assert_abs_diff_eq!(
            wilcoxon_tie_fraction(&[-1.0, 1.0, 1.0, 3.0]),
            2.0 / 6.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn alpha_is_validated() {
        let ds = kendall_dataset(10, 0, 0.0, 30);
        assert!(kendall_classical(ds.labeled_y(), 0.0).is_err());
        assert!(kendall_classical(ds.labeled_y(), 1.0).is_err());
    }
}
