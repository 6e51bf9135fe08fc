//! Assistant-function estimation: native regressors, linear-smoother
//! introspection, and the nested regression producing the cross-fit targets.
//!
//! Regressors:
//! - `knn`: Euclidean k-nearest-neighbor averaging, distance ties broken by
//!   lower training index;
//! - `partition`: axis-aligned equal-width bins over the training range
//!   (d <= 3), out-of-range queries clamp to the boundary bin, empty bins
//!   predict the global training mean;
//! - `ols`: least squares on `[1, X]` via QR, with a ridge fallback
//!   (`1e-8 * trace/p`) and a diagnostic flag when the system is
//!   rank-deficient;
//! - `kernel_ridge`: Gaussian-kernel ridge regression solving
//!   `argmin (1/n) sum (f(X_i) - z_i)^2 + lambda * ||f||^2`; the default
//!   bandwidth is the median pairwise training distance.
//!
//! `knn` and `partition` are linear smoothers and expose their weights.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{FoldId, Matrix, NestedSplit, SemiDataset};
use crate::kernels::{ell1_analytic, ell1_hat_generic, ell1_stats, Ell1Mode, KernelSpec};
use crate::numerics::{mean, KahanSum};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise distance of the training covariates.
    Auto,
    Fixed(f64),
}

/// Regressor configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum RegressorSpec {
    Knn { k: usize },
    Partition { bins_per_dim: usize, range: Option<Vec<(f64, f64)>> },
    Ols,
    KernelRidge { lambda: f64, bandwidth: Bandwidth },
}

impl RegressorSpec {
    /// Parse a CLI-style descriptor: `knn:k=5`, `ols`, `partition:bins=8`,
    /// `ridge:lambda=0.01,bw=auto` (or `bw=<float>`).
    pub fn parse(s: &str) -> Result<Self> {
        let (head, rest) = match s.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (s, None),
        };
        let opts = |rest: Option<&str>| -> Vec<(String, String)> {
            rest.map(|r| {
                r.split(',')
                    .filter(|p| !p.is_empty())
                    .map(|pair| match pair.split_once('=') {
                        Some((k, v)) => (k.trim().to_string(), v.trim().to_string()),
                        None => (pair.trim().to_string(), String::new()),
                    })
                    .collect()
            })
            .unwrap_or_default()
        };
        let bad = |msg: String| Error::InvalidParam(msg);
        match head {
            "knn" => {
                let mut k = None;
                for (key, value) in opts(rest) {
                    match key.as_str() {
                        "k" => {
                            k = Some(value.parse::<usize>().map_err(|_| {
                                bad(format!("knn k must be a positive integer, got `{value}`"))
                            })?)
                        }
                        _ => return Err(bad(format!("unknown knn option `{key}`"))),
                    }
                }
                let k = k.ok_or_else(|| bad("knn requires k, e.g. knn:k=5".into()))?;
                if k == 0 {
                    return Err(bad("knn k must be >= 1".into()));
                }
                Ok(RegressorSpec::Knn { k })
            }
            "partition" => {
                let mut bins = None;
                for (key, value) in opts(rest) {
                    match key.as_str() {
                        "bins" => {
                            bins = Some(value.parse::<usize>().map_err(|_| {
                                bad(format!("partition bins must be an integer, got `{value}`"))
                            })?)
                        }
                        _ => return Err(bad(format!("unknown partition option `{key}`"))),
                    }
                }
                let bins_per_dim =
                    bins.ok_or_else(|| bad("partition requires bins, e.g. partition:bins=8".into()))?;
                if bins_per_dim == 0 {
                    return Err(bad("partition bins must be >= 1".into()));
                }
                Ok(RegressorSpec::Partition { bins_per_dim, range: None })
            }
            "ols" => {
                if rest.is_some() {
                    return Err(bad("ols takes no options".into()));
                }
                Ok(RegressorSpec::Ols)
            }
            "ridge" => {
                let mut lambda = None;
                let mut bw = Bandwidth::Auto;
                for (key, value) in opts(rest) {
                    match key.as_str() {
                        "lambda" => {
                            lambda = Some(value.parse::<f64>().map_err(|_| {
                                bad(format!("ridge lambda must be a float, got `{value}`"))
                            })?)
                        }
                        "bw" => {
                            bw = if value == "auto" {
                                Bandwidth::Auto
                            } else {
                                Bandwidth::Fixed(value.parse::<f64>().map_err(|_| {
                                    bad(format!("ridge bw must be `auto` or a float, got `{value}`"))
                                })?)
                            }
                        }
                        _ => return Err(bad(format!("unknown ridge option `{key}`"))),
                    }
                }
                let lambda =
                    lambda.ok_or_else(|| bad("ridge requires lambda, e.g. ridge:lambda=0.01".into()))?;
                Ok(RegressorSpec::KernelRidge { lambda, bandwidth: bw })
            }
            _ => Err(bad(format!(
                "unknown regressor `{head}`; available: knn:k=K, partition:bins=B, ols, ridge:lambda=L[,bw=auto|H]"
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            RegressorSpec::Knn { k } if *k == 0 => {
                Err(Error::InvalidParam("knn k must be >= 1".into()))
            }
            RegressorSpec::Partition { bins_per_dim, .. } if *bins_per_dim == 0 => {
                Err(Error::InvalidParam("partition bins must be >= 1".into()))
            }
            RegressorSpec::KernelRidge { lambda, bandwidth } => {
                if *lambda <= 0.0 {
                    return Err(Error::InvalidParam("ridge lambda must be > 0".into()));
                }
                if let Bandwidth::Fixed(h) = bandwidth {
                    if *h <= 0.0 {
                        return Err(Error::InvalidParam("ridge bandwidth must be > 0".into()));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Fitted state of a regressor; immutable and safe for concurrent prediction.
#[derive(Debug, Clone)]
pub struct FittedModel {
    variant: FittedVariant,
    d: usize,
    train_n: usize,
    /// Set when a rank-deficient least-squares system fell back to ridge.
    pub ridged: bool,
}

#[derive(Debug, Clone)]
enum FittedVariant {
    Knn {
        k: usize,
        x: Matrix,
        z: Vec<f64>,
        grid: Option<GridIndex>,
    },
    Partition {
        bins: usize,
        lo: Vec<f64>,
        width: Vec<f64>,
        cell_mean: Vec<f64>,
        cell_count: Vec<u32>,
        cell_of_train: Vec<u32>,
    },
    Ols {
        beta: Vec<f64>, // beta[0] is the intercept
    },
    KernelRidge {
        x: Matrix,
        alpha: Vec<f64>,
        bandwidth: f64,
    },
}

/// Fit a regressor to covariates `x` and real responses `z`.
pub fn fit(spec: &RegressorSpec, x: &Matrix, z: &[f64]) -> Result<FittedModel> {
    spec.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::EmptyData("regression needs at least one row"));
    }
    if z.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: z.len() });
    }
    let d = x.ncols();
    let mut ridged = false;
    let variant = match spec {
        RegressorSpec::Knn { k } => {
            if *k > n {
                return Err(Error::KnnTooLarge { k: *k, n });
            }
            FittedVariant::Knn {
                k: *k,
                x: x.clone(),
                z: z.to_vec(),
                grid: GridIndex::build(x),
            }
        }
        RegressorSpec::Partition { bins_per_dim, range } => {
            if d > 3 {
                return Err(Error::Unsupported(format!(
                    "partition regression is restricted to d <= 3, got d = {d}"
                )));
            }
            let bins = *bins_per_dim;
            let (lo, hi) = match range {
                Some(bounds) => {
                    if bounds.len() != d {
                        return Err(Error::DimensionMismatch { expected: d, got: bounds.len() });
                    }
                    (
                        bounds.iter().map(|b| b.0).collect::<Vec<_>>(),
                        bounds.iter().map(|b| b.1).collect::<Vec<_>>(),
                    )
                }
                None => {
                    let mut lo = vec![f64::INFINITY; d];
                    let mut hi = vec![f64::NEG_INFINITY; d];
                    for row in x.iter_rows() {
                        for (j, &v) in row.iter().enumerate() {
                            lo[j] = lo[j].min(v);
                            hi[j] = hi[j].max(v);
                        }
                    }
                    (lo, hi)
                }
            };
            let width: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| (h - l).max(0.0)).collect();
            let n_cells = bins.pow(d as u32);
            let mut sums = vec![KahanSum::new(); n_cells];
            let mut counts = vec![0u32; n_cells];
            let mut cell_of_train = Vec::with_capacity(n);
            for (row, &zi) in x.iter_rows().zip(z) {
                let c = cell_index(row, &lo, &width, bins);
                sums[c].add(zi);
                counts[c] += 1;
                cell_of_train.push(c as u32);
            }
            let global_mean = mean(z);
            let cell_mean: Vec<f64> = sums
                .iter()
                .zip(&counts)
                .map(|(s, &c)| if c > 0 { s.total() / c as f64 } else { global_mean })
                .collect();
            FittedVariant::Partition {
                bins,
                lo,
                width,
                cell_mean,
                cell_count: counts,
                cell_of_train,
            }
        }
        RegressorSpec::Ols => {
            let (beta, fell_back) = solve_ols(x, z)?;
            ridged = fell_back;
            FittedVariant::Ols { beta }
        }
        RegressorSpec::KernelRidge { lambda, bandwidth } => {
            let h = match bandwidth {
                Bandwidth::Fixed(h) => *h,
                Bandwidth::Auto => {
                    let med = median_pairwise_distance(x);
                    if med > 0.0 {
                        med
                    } else {
                        1.0 // all training points coincide
                    }
                }
            };
            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v = gaussian_kernel(x.row(i), x.row(j), h);
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            for i in 0..n {
                k[(i, i)] += n as f64 * lambda;
            }
            let rhs = DVector::from_column_slice(z);
            let chol = k
                .cholesky()
                .ok_or_else(|| Error::Singular("kernel ridge system not positive definite".into()))?;
            let alpha = chol.solve(&rhs);
            FittedVariant::KernelRidge {
                x: x.clone(),
                alpha: alpha.iter().copied().collect(),
                bandwidth: h,
            }
        }
    };
    Ok(FittedModel { variant, d, train_n: n, ridged })
}

fn solve_ols(x: &Matrix, z: &[f64]) -> Result<(Vec<f64>, bool)> {
    let n = x.nrows();
    let p = x.ncols() + 1;
    let mut a = DMatrix::zeros(n, p);
    for (i, row) in x.iter_rows().enumerate() {
        a[(i, 0)] = 1.0;
        for (j, &v) in row.iter().enumerate() {
            a[(i, j + 1)] = v;
        }
    }
    let rhs = DVector::from_column_slice(z);
    if n >= p {
        let qr = a.clone().qr();
        let r = qr.r();
        let max_diag = (0..p).map(|i| r[(i, i)].abs()).fold(0.0f64, f64::max);
        let min_diag = (0..p).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        if max_diag > 0.0 && min_diag > 1e-10 * max_diag {
            let qtz = qr.q().transpose() * &rhs;
            let beta = r
                .solve_upper_triangular(&qtz)
                .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
            return Ok((beta.iter().copied().collect(), false));
        }
    }
    // Rank-deficient (or underdetermined): ridge fallback on the normal
    // equations, flagged for diagnostics.
    let gram = a.transpose() * &a;
    let trace: f64 = (0..p).map(|i| gram[(i, i)]).sum();
    let ridge = 1e-8 * trace / p as f64;
    let mut reg = gram;
    for i in 0..p {
        reg[(i, i)] += ridge.max(f64::MIN_POSITIVE);
    }
    let atz = a.transpose() * &rhs;
    let chol = reg
        .cholesky()
        .ok_or_else(|| Error::Singular("ridge-regularized normal equations not PD".into()))?;
    let beta = chol.solve(&atz);
    Ok((beta.iter().copied().collect(), true))
}

#[inline]
fn gaussian_kernel(a: &[f64], b: &[f64], h: f64) -> f64 {
    let mut d2 = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        d2 += d * d;
    }
    (-d2 / (2.0 * h * h)).exp()
}

fn median_pairwise_distance(x: &Matrix) -> f64 {
    let n = x.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut d2s = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d2s.push(squared_distance(x.row(i), x.row(j)));
        }
    }
    crate::numerics::median(&d2s).sqrt()
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

#[inline]
fn cell_index(row: &[f64], lo: &[f64], width: &[f64], bins: usize) -> usize {
    let mut idx = 0usize;
    for (j, &v) in row.iter().enumerate() {
        let b = if width[j] <= 0.0 {
            0
        } else {
            // Clamp out-of-range queries to the boundary bin.
            let t = ((v - lo[j]) / width[j] * bins as f64).floor();
            (t.max(0.0) as usize).min(bins - 1)
        };
        idx = idx * bins + b;
    }
    idx
}

impl FittedModel {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn train_size(&self) -> usize {
        self.train_n
    }

    pub fn is_linear_smoother(&self) -> bool {
        matches!(
            self.variant,
            FittedVariant::Knn { .. } | FittedVariant::Partition { .. }
        )
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: x.len() });
        }
        let mut scratch = Vec::new();
        Ok(self.predict_inner(x, &mut scratch))
    }

    /// Predictions at every row of `xs`; parallelized for large query sets.
    pub fn predict_many(&self, xs: &Matrix) -> Result<Vec<f64>> {
        if xs.ncols() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: xs.ncols() });
        }
        let nq = xs.nrows();
        // Below this size the thread handoff costs more than the work.
        if nq * self.train_n < 1 << 16 {
            let mut scratch = Vec::new();
            return Ok((0..nq)
                .map(|i| self.predict_inner(xs.row(i), &mut scratch))
                .collect());
        }
        Ok((0..nq)
            .into_par_iter()
            .map_init(Vec::new, |scratch, i| self.predict_inner(xs.row(i), scratch))
            .collect())
    }

    fn predict_inner(&self, x: &[f64], scratch: &mut Vec<(f64, u32)>) -> f64 {
        match &self.variant {
            FittedVariant::Knn { k, x: tx, z, grid } => {
                match grid {
                    Some(grid) => grid.nearest_k(tx, x, *k, scratch),
                    None => nearest_k_scan(tx, x, *k, scratch),
                }
                let mut acc = 0.0;
                for &(_, i) in scratch.iter() {
                    acc += z[i as usize];
                }
                acc / *k as f64
            }
            FittedVariant::Partition { bins, lo, width, cell_mean, .. } => {
                cell_mean[cell_index(x, lo, width, *bins)]
            }
            FittedVariant::Ols { beta } => {
                let mut acc = beta[0];
                for (b, v) in beta[1..].iter().zip(x) {
                    acc += b * v;
                }
                acc
            }
            FittedVariant::KernelRidge { x: tx, alpha, bandwidth } => {
                let mut acc = 0.0;
                for (i, row) in tx.iter_rows().enumerate() {
                    acc += alpha[i] * gaussian_kernel(row, x, *bandwidth);
                }
                acc
            }
        }
    }

    /// Linear-smoother weights at a query point: the prediction equals the
    /// weighted sum of training responses. Only `knn` and `partition`
    /// support this.
    pub fn smoother_weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: x.len() });
        }
        match &self.variant {
            FittedVariant::Knn { k, x: tx, grid, .. } => {
                let mut scratch = Vec::new();
                match grid {
                    Some(grid) => grid.nearest_k(tx, x, *k, &mut scratch),
                    None => nearest_k_scan(tx, x, *k, &mut scratch),
                }
                let mut w = vec![0.0; self.train_n];
                for &(_, i) in scratch.iter() {
                    w[i as usize] = 1.0 / *k as f64;
                }
                Ok(w)
            }
            FittedVariant::Partition {
                bins,
                lo,
                width,
                cell_count,
                cell_of_train,
                ..
            } => {
                let c = cell_index(x, lo, width, *bins) as u32;
                let count = cell_count[c as usize];
                if count == 0 {
                    // Empty cell predicts the global mean: uniform weights.
                    return Ok(vec![1.0 / self.train_n as f64; self.train_n]);
                }
                Ok(cell_of_train
                    .iter()
                    .map(|&tc| if tc == c { 1.0 / count as f64 } else { 0.0 })
                    .collect())
            }
            FittedVariant::Ols { .. } => Err(Error::Unsupported(
                "smoother weights are defined for knn/partition, not ols".into(),
            )),
            FittedVariant::KernelRidge { .. } => Err(Error::Unsupported(
                "smoother weights are defined for knn/partition, not kernel ridge".into(),
            )),
        }
    }
}

#[inline]
fn neighbor_cmp(a: &(f64, u32), b: &(f64, u32)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1))
}

/// Full-scan k-nearest search. Leaves the k winners sorted by
/// (distance, index) in `scratch`, so downstream sums are order-stable
/// regardless of the search path taken.
fn nearest_k_scan(train: &Matrix, query: &[f64], k: usize, scratch: &mut Vec<(f64, u32)>) {
    scratch.clear();
    scratch.extend(
        train
            .iter_rows()
            .enumerate()
            .map(|(i, row)| (squared_distance(row, query), i as u32)),
    );
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k - 1, neighbor_cmp);
        scratch.truncate(k);
    }
    scratch.sort_unstable_by(neighbor_cmp);
}

/// Uniform-cell spatial index for low-dimensional neighbor queries. Queries
/// expand outward ring by ring (Chebyshev distance in cell coordinates),
/// pruning cells whose bounding box cannot beat the current k-th best; the
/// selected set is exactly the brute-force one under the (distance, index)
/// order.
#[derive(Debug, Clone)]
struct GridIndex {
    lo: Vec<f64>,
    width: Vec<f64>,
    bins: Vec<usize>,
    /// Point indices per cell, row-major over the cell lattice.
    cells: Vec<Vec<u32>>,
    /// Smallest positive cell width (ring-termination bound).
    min_width: f64,
}

impl GridIndex {
    const MAX_DIM: usize = 4;
    const MIN_POINTS: usize = 192;

    fn build(x: &Matrix) -> Option<GridIndex> {
        let d = x.ncols();
        let n = x.nrows();
        if d > Self::MAX_DIM || n < Self::MIN_POINTS {
            return None;
        }
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for row in x.iter_rows() {
            for (j, &v) in row.iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        // Aim for a handful of points per cell.
        let per_dim = ((n as f64 / 4.0).powf(1.0 / d as f64).ceil() as usize).clamp(2, 48);
        let bins: Vec<usize> = (0..d)
            .map(|j| if hi[j] > lo[j] { per_dim } else { 1 })
            .collect();
        let width: Vec<f64> = (0..d)
            .map(|j| {
                if hi[j] > lo[j] {
                    (hi[j] - lo[j]) / bins[j] as f64
                } else {
                    0.0
                }
            })
            .collect();
        let min_width = width
            .iter()
            .copied()
            .filter(|w| *w > 0.0)
            .fold(f64::INFINITY, f64::min);
        if !min_width.is_finite() {
            return None; // all coordinates degenerate
        }
        let n_cells: usize = bins.iter().product();
        let mut cells = vec![Vec::new(); n_cells];
        for (i, row) in x.iter_rows().enumerate() {
            cells[Self::cell_of(row, &lo, &width, &bins)].push(i as u32);
        }
        Some(GridIndex { lo, width, bins, cells, min_width })
    }

    fn cell_of(row: &[f64], lo: &[f64], width: &[f64], bins: &[usize]) -> usize {
        let mut idx = 0usize;
        for (j, &v) in row.iter().enumerate() {
            let b = if width[j] <= 0.0 {
                0
            } else {
                let t = ((v - lo[j]) / width[j]).floor();
                (t.max(0.0) as usize).min(bins[j] - 1)
            };
            idx = idx * bins[j] + b;
        }
        idx
    }

    /// Squared distance from the query to a cell's bounding box.
    fn box_distance2(&self, coords: &[usize], query: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (j, &c) in coords.iter().enumerate() {
            if self.width[j] <= 0.0 {
                continue;
            }
            let cell_lo = self.lo[j] + c as f64 * self.width[j];
            let cell_hi = cell_lo + self.width[j];
            let v = query[j];
            if v < cell_lo {
                let d = cell_lo - v;
                acc += d * d;
            } else if v > cell_hi {
                let d = v - cell_hi;
                acc += d * d;
            }
        }
        acc
    }

    fn nearest_k(&self, train: &Matrix, query: &[f64], k: usize, out: &mut Vec<(f64, u32)>) {
        let d = self.bins.len();
        // Cell coordinates of the query, clamped to the lattice.
        let home: Vec<usize> = (0..d)
            .map(|j| {
                if self.width[j] <= 0.0 {
                    0
                } else {
                    let t = ((query[j] - self.lo[j]) / self.width[j]).floor();
                    (t.max(0.0) as usize).min(self.bins[j] - 1)
                }
            })
            .collect();
        out.clear();
        let mut coords = Vec::with_capacity(d);
        let mut ring = 0usize;
        loop {
            self.visit_ring(&home, ring, &mut coords, 0, false, &mut |cell_idx, coords| {
                let kth = out.last().map(|b| b.0).unwrap_or(f64::INFINITY);
                if out.len() == k && self.box_distance2(coords, query) > kth {
                    return;
                }
                for &pi in &self.cells[cell_idx] {
                    let cand = (squared_distance(train.row(pi as usize), query), pi);
                    if out.len() < k {
                        let pos = out
                            .binary_search_by(|probe| neighbor_cmp(probe, &cand))
                            .unwrap_or_else(|e| e);
                        out.insert(pos, cand);
                    } else if neighbor_cmp(&cand, out.last().expect("k > 0")).is_lt() {
                        let pos = out
                            .binary_search_by(|probe| neighbor_cmp(probe, &cand))
                            .unwrap_or_else(|e| e);
                        out.insert(pos, cand);
                        out.pop();
                    }
                }
            });
            // No cell at ring r+1 can hold a point closer than r * min_width;
            // strict comparison keeps boundary ties exact.
            let bound = ring as f64 * self.min_width;
            if out.len() == k && out.last().expect("k > 0").0 < bound * bound {
                break;
            }
            ring += 1;
            let max_ring = self
                .bins
                .iter()
                .zip(&home)
                .map(|(&b, &h)| h.max(b - 1 - h))
                .max()
                .unwrap_or(0);
            if ring > max_ring {
                break;
            }
        }
    }

    /// Enumerate cells at exactly Chebyshev ring distance `ring` from `home`.
    fn visit_ring(
        &self,
        home: &[usize],
        ring: usize,
        coords: &mut Vec<usize>,
        dim: usize,
        pinned: bool,
        f: &mut impl FnMut(usize, &[usize]),
    ) {
        if dim == home.len() {
            if pinned || ring == 0 {
                let mut idx = 0usize;
                for (j, &c) in coords.iter().enumerate() {
                    idx = idx * self.bins[j] + c;
                }
                f(idx, coords);
            }
            return;
        }
        let h = home[dim] as isize;
        let b = self.bins[dim] as isize;
        let r = ring as isize;
        let remaining_can_pin = home[dim + 1..].iter().enumerate().any(|(off, &hj)| {
            let bj = self.bins[dim + 1 + off];
            hj >= ring || hj + ring <= bj - 1
        });
        let lo = (h - r).max(0);
        let hi = (h + r).min(b - 1);
        for c in lo..=hi {
            let offset = (c - h).unsigned_abs();
            if offset < ring && !pinned && !remaining_can_pin {
                continue; // this branch can never reach Chebyshev distance `ring`
            }
            coords.push(c as usize);
            self.visit_ring(home, ring, coords, dim + 1, pinned || offset == ring, f);
            coords.pop();
        }
    }
}

/// Fit the assistant function on one cross-fit fold.
///
/// With an analytic first projection, the targets are the closed-form
/// estimates computed from the fold's own responses and the regression runs
/// over the whole fold. The nested path instead builds the generic
/// first-projection estimator from `part_a` and regresses its values over
/// `part_b` (labeled rows only).
pub fn nested_fit_f(
    ds: &SemiDataset,
    split: &crate::data::CrossFitSplit,
    fold: FoldId,
    kernel: &KernelSpec,
    spec: &RegressorSpec,
    ell1: Ell1Mode,
) -> Result<FittedModel> {
    let fold_range = split.labeled(fold);
    let analytic = match ell1 {
        Ell1Mode::Auto => kernel.has_analytic_ell1(),
        Ell1Mode::Analytic => {
            if !kernel.has_analytic_ell1() {
                return Err(Error::NoAnalyticEll1(kernel.name().into()));
            }
            true
        }
        Ell1Mode::Generic => false,
    };
    if analytic {
        if fold_range.len() < 2 {
            return Err(Error::FoldTooSmall(format!(
                "assistant fit needs >= 2 labeled rows in the fold, got {}",
                fold_range.len()
            )));
        }
        let fold_y = ds.labeled_y().slice_rows(fold_range.clone());
        let stats = ell1_stats(kernel, &fold_y)?;
        let targets: Vec<f64> = fold_y
            .iter_rows()
            .map(|y| ell1_analytic(kernel, y, &stats))
            .collect::<Result<_>>()?;
        let fold_x = ds.labeled_x().slice_rows(fold_range);
        fit(spec, &fold_x, &targets)
    } else {
        let r = kernel.order();
        if fold_range.len() < r.max(2) {
            return Err(Error::FoldTooSmall(format!(
                "nested fit needs >= {} labeled rows in the fold, got {}",
                r.max(2),
                fold_range.len()
            )));
        }
        let nested: NestedSplit = crate::data::split_nested(split, fold, ds.n())?;
        if nested.part_a.len() < r.saturating_sub(1) {
            return Err(Error::FoldTooSmall(format!(
                "part_a needs >= {} rows for an order-{} kernel, got {}",
                r - 1,
                r,
                nested.part_a.len()
            )));
        }
        let sample_a = ds.labeled_y().slice_rows(nested.part_a.clone());
        let targets: Vec<f64> = nested
            .part_b
            .clone()
            .map(|i| ell1_hat_generic(kernel, ds.labeled_y().row(i), &sample_a))
            .collect::<Result<_>>()?;
        let fit_x = ds.labeled_x().slice_rows(nested.part_b);
        fit(spec, &fit_x, &targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_crossfit;
    use approx::assert_abs_diff_eq;

    fn mat(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn parse_round_trips() {
        assert_eq!(RegressorSpec::parse("knn:k=5").unwrap(), RegressorSpec::Knn { k: 5 });
        assert_eq!(RegressorSpec::parse("ols").unwrap(), RegressorSpec::Ols);
        assert_eq!(
            RegressorSpec::parse("partition:bins=8").unwrap(),
            RegressorSpec::Partition { bins_per_dim: 8, range: None }
        );
        assert_eq!(
            RegressorSpec::parse("ridge:lambda=0.01,bw=auto").unwrap(),
            RegressorSpec::KernelRidge { lambda: 0.01, bandwidth: Bandwidth::Auto }
        );
        assert_eq!(
            RegressorSpec::parse("ridge:lambda=1,bw=2.5").unwrap(),
            RegressorSpec::KernelRidge { lambda: 1.0, bandwidth: Bandwidth::Fixed(2.5) }
        );
        assert!(RegressorSpec::parse("forest").is_err());
        assert!(RegressorSpec::parse("knn").is_err());
        assert!(RegressorSpec::parse("knn:k=0").is_err());
    }

    #[test]
    fn ols_interpolates_two_points() {
        let x = mat(&[vec![0.0], vec![1.0]]);
        let model = fit(&RegressorSpec::Ols, &x, &[1.0, 3.0]).unwrap();
        assert!(!model.ridged);
        assert_abs_diff_eq!(model.predict(&[2.0]).unwrap(), 5.0, epsilon = 1e-10);
    }

    #[test]
    fn ols_duplicate_column_falls_back_to_ridge() {
        // x2 = x1 exactly: rank deficient.
        let x = mat(&[
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![2.0, 2.0],
            vec![3.0, 3.0],
        ]);
        let model = fit(&RegressorSpec::Ols, &x, &[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(model.ridged);
        assert_abs_diff_eq!(model.predict(&[1.5, 1.5]).unwrap(), 1.5, epsilon = 1e-3);
    }

    #[test]
    fn knn_examples() {
        let x = mat(&[vec![0.0], vec![10.0]]);
        let model = fit(&RegressorSpec::Knn { k: 1 }, &x, &[0.0, 5.0]).unwrap();
        assert_eq!(model.predict(&[1.0]).unwrap(), 0.0);
        assert_eq!(model.predict(&[9.0]).unwrap(), 5.0);
        assert!(matches!(
            fit(&RegressorSpec::Knn { k: 3 }, &x, &[0.0, 5.0]),
            Err(Error::KnnTooLarge { k: 3, n: 2 })
        ));
    }

    #[test]
    fn grid_index_matches_full_scan() {
        let mut stream = crate::rng::Stream::new(41);
        for d in 1..=4usize {
            // Coordinates on a coarse lattice so exact distance ties occur.
            let n = 400;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| (stream.next_normal() * 2.0).round() * 0.5)
                        .collect()
                })
                .collect();
            let x = mat(&rows);
            let grid = GridIndex::build(&x).expect("grid for low-d");
            for k in [1usize, 5, 32] {
                for _ in 0..60 {
                    // Half the queries far outside the training range.
                    let scale = if stream.next_f64() < 0.5 { 1.0 } else { 8.0 };
                    let q: Vec<f64> = (0..d).map(|_| scale * stream.next_normal()).collect();
                    let mut via_grid = Vec::new();
                    grid.nearest_k(&x, &q, k, &mut via_grid);
                    let mut via_scan = Vec::new();
                    nearest_k_scan(&x, &q, k, &mut via_scan);
                    assert_eq!(via_grid, via_scan, "d={d} k={k} q={q:?}");
                }
            }
        }
    }

    #[test]
    fn knn_breaks_distance_ties_by_lower_index() {
        let x = mat(&[vec![1.0], vec![-1.0], vec![1.0]]);
        let model = fit(&RegressorSpec::Knn { k: 2 }, &x, &[10.0, 20.0, 30.0]).unwrap();
        // query 0: all three at distance 1; rows 0 and 1 win by index.
        assert_eq!(model.predict(&[0.0]).unwrap(), 15.0);
        let w = model.smoother_weights(&[0.0]).unwrap();
        assert_eq!(w, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn partition_examples() {
        let x = mat(&[vec![0.5], vec![1.5]]);
        let spec = RegressorSpec::Partition {
            bins_per_dim: 2,
            range: Some(vec![(0.0, 2.0)]),
        };
        let model = fit(&spec, &x, &[1.0, 3.0]).unwrap();
        assert_eq!(model.predict(&[0.2]).unwrap(), 1.0);
        assert_eq!(model.predict(&[1.9]).unwrap(), 3.0);
        // Outside the range clamps to the boundary bin.
        assert_eq!(model.predict(&[-5.0]).unwrap(), 1.0);
        assert_eq!(model.predict(&[7.0]).unwrap(), 3.0);

        let one_bin = fit(
            &RegressorSpec::Partition { bins_per_dim: 1, range: None },
            &x,
            &[1.0, 3.0],
        )
        .unwrap();
        assert_eq!(one_bin.predict(&[100.0]).unwrap(), 2.0);

        let wide = mat(&[vec![0.0, 0.0, 0.0, 0.0]]);
        assert!(fit(
            &RegressorSpec::Partition { bins_per_dim: 2, range: None },
            &wide,
            &[1.0]
        )
        .is_err());
    }

    #[test]
    fn partition_weights_match_cell_members() {
        let x = mat(&[vec![0.1], vec![0.2], vec![0.3], vec![1.7]]);
        let spec = RegressorSpec::Partition {
            bins_per_dim: 2,
            range: Some(vec![(0.0, 2.0)]),
        };
        let model = fit(&spec, &x, &[3.0, 6.0, 9.0, 100.0]).unwrap();
        let w = model.smoother_weights(&[0.5]).unwrap();
        assert_eq!(w, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
        let pred = model.predict(&[0.5]).unwrap();
        assert_abs_diff_eq!(pred, 6.0, epsilon = 1e-12);
    }

    #[test]
    fn smoother_weights_reproduce_predictions() {
        let mut stream = crate::rng::Stream::new(5);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![stream.next_normal(), stream.next_normal()])
            .collect();
        let z: Vec<f64> = (0..40).map(|_| stream.next_normal()).collect();
        let x = mat(&rows);
        for spec in [
            RegressorSpec::Knn { k: 7 },
            RegressorSpec::Partition { bins_per_dim: 3, range: None },
        ] {
            let model = fit(&spec, &x, &z).unwrap();
            for _ in 0..25 {
                let q = vec![stream.next_normal(), stream.next_normal()];
                let w = model.smoother_weights(&q).unwrap();
                assert!(w.iter().all(|&wi| wi >= 0.0));
                let wsum: f64 = w.iter().sum();
                assert!(wsum <= 1.0 + 1e-10);
                let combo: f64 = w.iter().zip(&z).map(|(wi, zi)| wi * zi).sum();
                assert_abs_diff_eq!(combo, model.predict(&q).unwrap(), epsilon = 1e-10);
            }
        }
        let ols = fit(&RegressorSpec::Ols, &x, &z).unwrap();
        assert!(matches!(
            ols.smoother_weights(&[0.0, 0.0]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn kernel_ridge_shrinks_to_zero_at_huge_lambda() {
        let mut stream = crate::rng::Stream::new(8);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| vec![stream.next_normal()]).collect();
        let z: Vec<f64> = rows.iter().map(|r| r[0] - 0.1).collect(); // roughly centered
        let x = mat(&rows);
        let model = fit(
            &RegressorSpec::KernelRidge { lambda: 1e6, bandwidth: Bandwidth::Auto },
            &x,
            &z,
        )
        .unwrap();
        for q in [-1.0, 0.0, 2.0] {
            assert!(model.predict(&[q]).unwrap().abs() < 1e-3);
        }
    }

    #[test]
    fn kernel_ridge_fits_smooth_signal() {
        let mut stream = crate::rng::Stream::new(9);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| vec![2.0 * stream.next_normal()]).collect();
        let z: Vec<f64> = rows.iter().map(|r| (r[0]).sin()).collect();
        let x = mat(&rows);
        let model = fit(
            &RegressorSpec::KernelRidge { lambda: 1e-4, bandwidth: Bandwidth::Auto },
            &x,
            &z,
        )
        .unwrap();
        let mut worst: f64 = 0.0;
        for i in -10..=10 {
            let q = i as f64 / 10.0;
            worst = worst.max((model.predict(&[q]).unwrap() - q.sin()).abs());
        }
        assert!(worst < 0.1, "worst abs error {worst}");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let x = mat(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let model = fit(&RegressorSpec::Knn { k: 1 }, &x, &[0.0, 1.0]).unwrap();
        assert!(model.predict(&[0.0]).is_err());
    }

    #[test]
    fn nested_fit_mean_kernel_equals_plain_regression() {
        let mut stream = crate::rng::Stream::new(2);
        let n = 12;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![stream.next_normal()]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x[0] + stream.next_normal()).collect();
        let ds = SemiDataset::from_scalar(&xs, &ys, &[]).unwrap();
        let split = split_crossfit(&ds).unwrap();
        let kernel = KernelSpec::mean();
        let model = nested_fit_f(
            &ds,
            &split,
            FoldId::One,
            &kernel,
            &RegressorSpec::Ols,
            Ell1Mode::Auto,
        )
        .unwrap();
        let fold_x = ds.labeled_x().slice_rows(split.fold1_labeled.clone());
        let fold_y: Vec<f64> = split.fold1_labeled.clone().map(|i| ys[i]).collect();
        let direct = fit(&RegressorSpec::Ols, &fold_x, &fold_y).unwrap();
        for q in [-1.0, 0.0, 1.0] {
            assert_abs_diff_eq!(
                model.predict(&[q]).unwrap(),
                direct.predict(&[q]).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn nested_fit_variance_analytic_targets() {
        // Fold responses {0, 2}: mu1 = 1, mu2 = 2, targets y^2/2 - y + 1 = {1, 1}.
        // A 1-NN fit then predicts 1 everywhere on the fold.
        let xs = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let ys = vec![0.0, 2.0, 5.0, 7.0];
        let ds = SemiDataset::from_scalar(&xs, &ys, &[]).unwrap();
        let split = split_crossfit(&ds).unwrap();
        let kernel = KernelSpec::variance();
        let model = nested_fit_f(
            &ds,
            &split,
            FoldId::One,
            &kernel,
            &RegressorSpec::Knn { k: 1 },
            Ell1Mode::Analytic,
        )
        .unwrap();
        assert_abs_diff_eq!(model.predict(&[0.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(model.predict(&[1.0]).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn nested_fit_generic_single_reference_point() {
        // n=8 -> fold1 = rows 0..4, part_a = rows 0..2, part_b = rows 2..4.
        // Wait: part_a = floor(8/4) = 2 rows. Use n=5: fold1 = 0..2,
        // part_a = {0}, part_b = {1}; target at row 1 is l(y1, y0).
        let xs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let ys = vec![1.0, 3.0, 0.0, 0.0, 0.0];
        let ds = SemiDataset::from_scalar(&xs, &ys, &[]).unwrap();
        let split = split_crossfit(&ds).unwrap();
        let kernel = KernelSpec::variance();
        let model = nested_fit_f(
            &ds,
            &split,
            FoldId::One,
            &kernel,
            &RegressorSpec::Knn { k: 1 },
            Ell1Mode::Generic,
        )
        .unwrap();
        // Single training point (x=1, target l(3,1) = (3-1)^2/2 = 2).
        assert_abs_diff_eq!(model.predict(&[100.0]).unwrap(), 2.0, epsilon = 1e-12);
    }
}
