//! Symmetric kernels of order `r`, their first projections, and the generic
//! unbiased first-projection estimator.
//!
//! A kernel maps `r` response rows to a real and is invariant under argument
//! permutations. The first projection `ell1(y) = E[l(y, Y_2, ..., Y_r)]`
//! drives the leading-order variance of the U-statistic; several builtins
//! carry closed-form estimators of it (computed from auxiliary sample
//! statistics), and every kernel supports the generic subset-average
//! estimator.
//!
//! Tie handling for the rank kernels is deterministic: `sign(0) = 0` in the
//! Kendall kernel and the Wilcoxon indicator is strict (`> 0`), so tied pairs
//! contribute zero. The underlying theory assumes continuous data, where ties
//! have probability zero. Empirical distribution functions use the
//! `F(t) = #{Y_i <= t}/n` convention.

use std::sync::Arc;

use crate::data::Matrix;
use crate::numerics::{ecdf_sorted, mean, KahanSum};
use crate::{Error, Result};

pub type EvalFn = Arc<dyn Fn(&[&[f64]]) -> f64 + Send + Sync>;
pub type StatsFn = Arc<dyn Fn(&Matrix) -> Ell1Stats + Send + Sync>;
pub type AnalyticFn = Arc<dyn Fn(&[f64], &Ell1Stats) -> f64 + Send + Sync>;

/// How the per-row first-projection values are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ell1Mode {
    /// Analytic formula when the kernel has one, generic otherwise.
    #[default]
    Auto,
    /// Analytic formula; error if the kernel lacks one.
    Analytic,
    /// Generic subset-average estimator.
    Generic,
}

/// A symmetric kernel of order `r` over response rows of a fixed arity.
#[derive(Clone)]
pub struct KernelSpec {
    name: String,
    order: usize,
    response_arity: usize,
    eval: EvalFn,
    analytic: Option<(StatsFn, AnalyticFn)>,
}

impl std::fmt::Debug for KernelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelSpec")
            .field("name", &self.name)
            .field("order", &self.order)
            .field("response_arity", &self.response_arity)
            .field("analytic", &self.analytic.is_some())
            .finish()
    }
}

#[inline]
fn sign3(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub const BUILTIN_NAMES: &[&str] = &["mean", "variance", "gini", "product", "kendall", "wilcoxon"];

impl KernelSpec {
    /// Register a custom kernel. `eval` must be symmetric in its `order`
    /// arguments; the symmetry property tests exercise builtins only, so
    /// callers own that invariant for custom kernels.
    pub fn new(
        name: impl Into<String>,
        order: usize,
        response_arity: usize,
        eval: EvalFn,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParam("kernel order must be >= 1".into()));
        }
        if response_arity == 0 {
            return Err(Error::InvalidParam("response arity must be >= 1".into()));
        }
        Ok(Self {
            name: name.into(),
            order,
            response_arity,
            eval,
            analytic: None,
        })
    }

    /// Attach an analytic first-projection estimator: `stats` summarizes a
    /// labeled response sample, `eval` maps `(y, stats)` to `ell1_hat(y)`.
    pub fn with_analytic(mut self, stats: StatsFn, eval: AnalyticFn) -> Self {
        self.analytic = Some((stats, eval));
        self
    }

    /// Look up a builtin kernel by name.
    pub fn by_name(name: &str) -> Result<KernelSpec> {
        match name {
            "mean" => Ok(Self::mean()),
            "variance" => Ok(Self::variance()),
            "gini" => Ok(Self::gini()),
            "product" => Ok(Self::product()),
            "kendall" => Ok(Self::kendall()),
            "wilcoxon" => Ok(Self::wilcoxon()),
            _ => Err(Error::UnknownKernel {
                name: name.into(),
                available: BUILTIN_NAMES.join(", "),
            }),
        }
    }

    /// `l(y) = y`; estimates the mean.
    pub fn mean() -> KernelSpec {
        KernelSpec {
            name: "mean".into(),
            order: 1,
            response_arity: 1,
            eval: Arc::new(|rows| rows[0][0]),
            analytic: Some((
                Arc::new(|_| Ell1Stats::None),
                Arc::new(|y, _| y[0]),
            )),
        }
    }

    /// `l(y1,y2) = (y1-y2)^2 / 2`; estimates the variance.
    pub fn variance() -> KernelSpec {
        KernelSpec {
            name: "variance".into(),
            order: 2,
            response_arity: 1,
            eval: Arc::new(|rows| {
                let d = rows[0][0] - rows[1][0];
                0.5 * d * d
            }),
            analytic: Some((
                Arc::new(|sample| {
                    let ys = sample.column0();
                    let mu1 = mean(&ys);
                    let sq: Vec<f64> = ys.iter().map(|y| y * y).collect();
                    Ell1Stats::Moments { mu1, mu2: mean(&sq) }
                }),
                Arc::new(|y, stats| match stats {
                    Ell1Stats::Moments { mu1, mu2 } => 0.5 * y[0] * y[0] - y[0] * mu1 + 0.5 * mu2,
                    _ => f64::NAN,
                }),
            )),
        }
    }

    /// `l(y1,y2) = |y1-y2|`; Gini's mean difference. No analytic projection.
    pub fn gini() -> KernelSpec {
        KernelSpec {
            name: "gini".into(),
            order: 2,
            response_arity: 1,
            eval: Arc::new(|rows| (rows[0][0] - rows[1][0]).abs()),
            analytic: None,
        }
    }

    /// `l(y1,y2) = y1*y2`; estimates the squared mean.
    pub fn product() -> KernelSpec {
        KernelSpec {
            name: "product".into(),
            order: 2,
            response_arity: 1,
            eval: Arc::new(|rows| rows[0][0] * rows[1][0]),
            analytic: Some((
                Arc::new(|sample| {
                    let ys = sample.column0();
                    let mu1 = mean(&ys);
                    let sq: Vec<f64> = ys.iter().map(|y| y * y).collect();
                    Ell1Stats::Moments { mu1, mu2: mean(&sq) }
                }),
                Arc::new(|y, stats| match stats {
                    Ell1Stats::Moments { mu1, .. } => y[0] * mu1,
                    _ => f64::NAN,
                }),
            )),
        }
    }

    /// `l((v1,w1),(v2,w2)) = sign(v1-v2) * sign(w1-w2)`; Kendall's tau kernel
    /// over bivariate responses.
    pub fn kendall() -> KernelSpec {
        KernelSpec {
            name: "kendall".into(),
            order: 2,
            response_arity: 2,
            eval: Arc::new(|rows| {
                sign3(rows[0][0] - rows[1][0]) * sign3(rows[0][1] - rows[1][1])
            }),
            analytic: Some((
                Arc::new(|sample| {
                    let mut vs: Vec<f64> = Vec::with_capacity(sample.nrows());
                    let mut ws: Vec<f64> = Vec::with_capacity(sample.nrows());
                    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(sample.nrows());
                    for row in sample.iter_rows() {
                        vs.push(row[0]);
                        ws.push(row[1]);
                        pairs.push((row[0], row[1]));
                    }
                    vs.sort_by(f64::total_cmp);
                    ws.sort_by(f64::total_cmp);
                    Ell1Stats::EcdfBivariate {
                        sorted_v: vs,
                        sorted_w: ws,
                        pairs,
                    }
                }),
                Arc::new(|y, stats| match stats {
                    Ell1Stats::EcdfBivariate {
                        sorted_v,
                        sorted_w,
                        pairs,
                    } => {
                        let (v, w) = (y[0], y[1]);
                        let fv = ecdf_sorted(sorted_v, v);
                        let fw = ecdf_sorted(sorted_w, w);
                        let joint = pairs.iter().filter(|(a, b)| *a <= v && *b <= w).count()
                            as f64
                            / pairs.len() as f64;
                        (1.0 - 2.0 * fv) * (1.0 - 2.0 * fw) + 4.0 * (joint - fv * fw)
                    }
                    _ => f64::NAN,
                }),
            )),
        }
    }

    /// `l(y1,y2) = 1(y1+y2 > 0)`; Wilcoxon signed-rank kernel.
    pub fn wilcoxon() -> KernelSpec {
        KernelSpec {
            name: "wilcoxon".into(),
            order: 2,
            response_arity: 1,
            eval: Arc::new(|rows| if rows[0][0] + rows[1][0] > 0.0 { 1.0 } else { 0.0 }),
            analytic: Some((
                Arc::new(|sample| {
                    let mut ys = sample.column0();
                    ys.sort_by(f64::total_cmp);
                    Ell1Stats::EcdfScalar { sorted: ys }
                }),
                Arc::new(|y, stats| match stats {
                    Ell1Stats::EcdfScalar { sorted } => 1.0 - ecdf_sorted(sorted, -y[0]),
                    _ => f64::NAN,
                }),
            )),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn response_arity(&self) -> usize {
        self.response_arity
    }

    pub fn has_analytic_ell1(&self) -> bool {
        self.analytic.is_some()
    }

    /// Evaluate the kernel on exactly `order` response rows.
    pub fn eval(&self, rows: &[&[f64]]) -> Result<f64> {
        if rows.len() != self.order {
            return Err(Error::ArityMismatch {
                kernel: self.name.clone(),
                expected: self.order,
                got: rows.len(),
            });
        }
        for row in rows {
            if row.len() != self.response_arity {
                return Err(Error::ArityMismatch {
                    kernel: self.name.clone(),
                    expected: self.response_arity,
                    got: row.len(),
                });
            }
        }
        Ok((self.eval)(rows))
    }

    /// Unchecked evaluation for hot loops; callers validate arity once.
    #[inline]
    pub fn eval_unchecked(&self, rows: &[&[f64]]) -> f64 {
        (self.eval)(rows)
    }

    /// Diagonal evaluation `l(y, y)` for order-2 kernels.
    pub fn eval_diag(&self, y: &[f64]) -> Result<f64> {
        if self.order != 2 {
            return Err(Error::Unsupported(format!(
                "diagonal evaluation needs an order-2 kernel, `{}` has order {}",
                self.name, self.order
            )));
        }
        self.eval(&[y, y])
    }
}

/// Auxiliary statistics feeding the analytic first-projection formulas.
/// Computed only from labeled responses.
#[derive(Debug, Clone)]
pub enum Ell1Stats {
    None,
    /// First and second raw moments of the response sample.
    Moments { mu1: f64, mu2: f64 },
    /// Sorted response sample for scalar ECDF lookups.
    EcdfScalar { sorted: Vec<f64> },
    /// Marginal ECDFs and the raw pairs for the joint ECDF.
    EcdfBivariate {
        sorted_v: Vec<f64>,
        sorted_w: Vec<f64>,
        pairs: Vec<(f64, f64)>,
    },
    /// Opaque state for custom kernels.
    Custom(Vec<f64>),
}

/// Compute the kernel's auxiliary statistics from a labeled response sample.
pub fn ell1_stats(kernel: &KernelSpec, sample: &Matrix) -> Result<Ell1Stats> {
    match &kernel.analytic {
        Some((stats, _)) => {
            if sample.nrows() == 0 {
                return Err(Error::EmptyData("statistics need at least one response"));
            }
            if sample.ncols() != kernel.response_arity {
                return Err(Error::ArityMismatch {
                    kernel: kernel.name.clone(),
                    expected: kernel.response_arity,
                    got: sample.ncols(),
                });
            }
            Ok(stats(sample))
        }
        None => Err(Error::NoAnalyticEll1(kernel.name.clone())),
    }
}

/// Analytic first-projection estimate at one response row.
pub fn ell1_analytic(kernel: &KernelSpec, y: &[f64], stats: &Ell1Stats) -> Result<f64> {
    match &kernel.analytic {
        Some((_, eval)) => Ok(eval(y, stats)),
        None => Err(Error::NoAnalyticEll1(kernel.name.clone())),
    }
}

/// Generic unbiased estimator of the first projection at `y`: the average of
/// `l(y, Y_{i_1}, ..., Y_{i_{r-1}})` over all (r-1)-subsets of `sample`.
///
/// By symmetry the subset average equals the permutation average, saving the
/// `(r-1)!` multiplicity.
pub fn ell1_hat_generic(kernel: &KernelSpec, y: &[f64], sample: &Matrix) -> Result<f64> {
    let r = kernel.order;
    if y.len() != kernel.response_arity {
        return Err(Error::ArityMismatch {
            kernel: kernel.name.clone(),
            expected: kernel.response_arity,
            got: y.len(),
        });
    }
    if r == 1 {
        return kernel.eval(&[y]);
    }
    let n = sample.nrows();
    if n < r - 1 {
        return Err(Error::SampleTooSmall { need: r - 1, got: n });
    }
    if r == 2 {
        let mut acc = KahanSum::new();
        for row in sample.iter_rows() {
            acc.add(kernel.eval_unchecked(&[y, row]));
        }
        return Ok(acc.total() / n as f64);
    }
    // General r: enumerate (r-1)-subsets.
    let mut acc = KahanSum::new();
    let mut count = 0u64;
    let mut indices: Vec<usize> = (0..r - 1).collect();
    let mut rows: Vec<&[f64]> = Vec::with_capacity(r);
    loop {
        rows.clear();
        rows.push(y);
        rows.extend(indices.iter().map(|&i| sample.row(i)));
        acc.add(kernel.eval_unchecked(&rows));
        count += 1;
        if !advance_combination(&mut indices, n) {
            break;
        }
    }
    Ok(acc.total() / count as f64)
}

/// Advance `indices` to the next combination of its length from `0..n`;
/// returns false when exhausted.
pub(crate) fn advance_combination(indices: &mut [usize], n: usize) -> bool {
    let k = indices.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if indices[i] != i + n - k {
            indices[i] += 1;
            for j in i + 1..k {
                indices[j] = indices[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Per-row first-projection values over a labeled response sample, under the
/// requested mode. Generic mode averages over subsets of the same sample
/// (which may include the evaluation row itself).
pub fn ell1_values(kernel: &KernelSpec, sample: &Matrix, mode: Ell1Mode) -> Result<Vec<f64>> {
    let analytic = match mode {
        Ell1Mode::Auto => kernel.has_analytic_ell1(),
        Ell1Mode::Analytic => {
            if !kernel.has_analytic_ell1() {
                return Err(Error::NoAnalyticEll1(kernel.name.clone()));
            }
            true
        }
        Ell1Mode::Generic => false,
    };
    if analytic {
        let stats = ell1_stats(kernel, sample)?;
        sample
            .iter_rows()
            .map(|y| ell1_analytic(kernel, y, &stats))
            .collect()
    } else {
        sample
            .iter_rows()
            .map(|y| ell1_hat_generic(kernel, y, sample))
            .collect()
    }
}
