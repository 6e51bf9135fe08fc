//! Dataset representation, CSV ingestion and the deterministic fold splits
//! that every cross-fit procedure depends on.
//!
//! Splits are positional (first half / second half), never randomized: the
//! index formulas define them and reproducibility requires determinism.
//! Callers wanting randomized folds shuffle first with
//! [`SemiDataset::shuffled`] under an explicit seed.

use std::ops::Range;
use std::path::Path;

use crate::rng::{roles, Stream};
use crate::{Error, Result};

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn from_vec(data: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { data, rows, cols })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            data,
            rows: rows.len(),
            cols,
        })
    }

    /// Single-column matrix from a slice (scalar responses).
    pub fn from_column(values: &[f64]) -> Self {
        Self {
            data: values.to_vec(),
            rows: values.len(),
            cols: 1,
        }
    }

    pub fn empty(cols: usize) -> Self {
        Self {
            data: Vec::new(),
            rows: 0,
            cols,
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    /// Rows selected by an index range, as a new matrix.
    pub fn slice_rows(&self, range: Range<usize>) -> Matrix {
        Matrix {
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
            rows: range.end - range.start,
            cols: self.cols,
        }
    }

    /// First column as a vector (convenience for scalar responses).
    pub fn column0(&self) -> Vec<f64> {
        self.iter_rows().map(|r| r[0]).collect()
    }
}

/// Labeled (x, y) pairs plus unlabeled x rows; the object every estimator
/// consumes. Immutable after construction and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiDataset {
    labeled_x: Matrix,
    labeled_y: Matrix,
    unlabeled_x: Matrix,
}

impl SemiDataset {
    pub fn new(labeled_x: Matrix, labeled_y: Matrix, unlabeled_x: Matrix) -> Result<Self> {
        if labeled_x.nrows() == 0 {
            return Err(Error::EmptyData("no labeled rows"));
        }
        if labeled_y.nrows() != labeled_x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: labeled_x.nrows(),
                got: labeled_y.nrows(),
            });
        }
        if unlabeled_x.nrows() > 0 && unlabeled_x.ncols() != labeled_x.ncols() {
            return Err(Error::DimensionMismatch {
                expected: labeled_x.ncols(),
                got: unlabeled_x.ncols(),
            });
        }
        if labeled_x.ncols() == 0 {
            return Err(Error::EmptyData("zero covariate columns"));
        }
        for (name, m) in [
            ("labeled_x", &labeled_x),
            ("labeled_y", &labeled_y),
            ("unlabeled_x", &unlabeled_x),
        ] {
            for (i, row) in m.iter_rows().enumerate() {
                if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        row: i,
                        col: format!("{name}[{j}]"),
                    });
                }
            }
        }
        Ok(Self {
            labeled_x,
            labeled_y,
            unlabeled_x,
        })
    }

    /// Labeled-only dataset with scalar responses.
    pub fn from_scalar(xs: &[Vec<f64>], ys: &[f64], unlabeled: &[Vec<f64>]) -> Result<Self> {
        Self::new(
            Matrix::from_rows(xs)?,
            Matrix::from_column(ys),
            if unlabeled.is_empty() {
                Matrix::empty(xs.first().map_or(1, Vec::len))
            } else {
                Matrix::from_rows(unlabeled)?
            },
        )
    }

    pub fn n(&self) -> usize {
        self.labeled_x.nrows()
    }

    pub fn m(&self) -> usize {
        self.unlabeled_x.nrows()
    }

    pub fn d(&self) -> usize {
        self.labeled_x.ncols()
    }

    /// Response arity (1 for scalar kernels, 2 for Kendall's bivariate response).
    pub fn q(&self) -> usize {
        self.labeled_y.ncols()
    }

    pub fn labeled_x(&self) -> &Matrix {
        &self.labeled_x
    }

    pub fn labeled_y(&self) -> &Matrix {
        &self.labeled_y
    }

    pub fn unlabeled_x(&self) -> &Matrix {
        &self.unlabeled_x
    }

    /// Covariate row in the global index space `0..n+m` (labeled first).
    #[inline]
    pub fn x_global(&self, i: usize) -> &[f64] {
        if i < self.n() {
            self.labeled_x.row(i)
        } else {
            self.unlabeled_x.row(i - self.n())
        }
    }

    /// Copy with labeled rows (jointly) and unlabeled rows permuted under a
    /// seeded shuffle. This is the supported way to obtain randomized folds.
    pub fn shuffled(&self, seed: u64) -> SemiDataset {
        let mut stream = Stream::keyed(seed, &[roles::SHUFFLE]);
        let perm_l = stream.permutation(self.n());
        let perm_u = stream.permutation(self.m());
        let gather = |m: &Matrix, perm: &[usize]| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| m.row(i).to_vec()).collect();
            Matrix::from_rows(&rows).expect("uniform row length")
        };
        SemiDataset {
            labeled_x: gather(&self.labeled_x, &perm_l),
            labeled_y: gather(&self.labeled_y, &perm_l),
            unlabeled_x: if self.m() == 0 {
                Matrix::empty(self.d())
            } else {
                gather(&self.unlabeled_x, &perm_u)
            },
        }
    }
}

/// Which cross-fit fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldId {
    One,
    Two,
}

/// Deterministic two-fold partition: fold 1 is the first half of the labeled
/// rows and the first half of the unlabeled rows, fold 2 the complements.
/// Labeled ranges index `0..n`; unlabeled ranges index `0..m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossFitSplit {
    pub fold1_labeled: Range<usize>,
    pub fold2_labeled: Range<usize>,
    pub fold1_unlabeled: Range<usize>,
    pub fold2_unlabeled: Range<usize>,
}

impl CrossFitSplit {
    pub fn labeled(&self, fold: FoldId) -> Range<usize> {
        match fold {
            FoldId::One => self.fold1_labeled.clone(),
            FoldId::Two => self.fold2_labeled.clone(),
        }
    }

    pub fn unlabeled(&self, fold: FoldId) -> Range<usize> {
        match fold {
            FoldId::One => self.fold1_unlabeled.clone(),
            FoldId::Two => self.fold2_unlabeled.clone(),
        }
    }

    /// Fold that the global index `i` (over `0..n+m`, labeled first) belongs to.
    pub fn fold_of_global(&self, i: usize, n: usize) -> FoldId {
        if i < n {
            if self.fold1_labeled.contains(&i) {
                FoldId::One
            } else {
                FoldId::Two
            }
        } else if self.fold1_unlabeled.contains(&(i - n)) {
            FoldId::One
        } else {
            FoldId::Two
        }
    }
}

/// Partition labeled rows `0..n` and unlabeled rows `0..m` into two folds of
/// sizes `floor(n/2)` / `n - floor(n/2)` (and likewise for `m`), in order.
pub fn split_crossfit(ds: &SemiDataset) -> Result<CrossFitSplit> {
    let n = ds.n();
    if n < 2 {
        return Err(Error::SampleTooSmall { need: 2, got: n });
    }
    let m = ds.m();
    Ok(CrossFitSplit {
        fold1_labeled: 0..n / 2,
        fold2_labeled: n / 2..n,
        fold1_unlabeled: 0..m / 2,
        fold2_unlabeled: m / 2..m,
    })
}

/// Nested split of one fold's labeled rows: `part_a` is the fold's first
/// `floor(n/4)` indices (with `n` the full labeled count), `part_b` the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NestedSplit {
    pub part_a: Range<usize>,
    pub part_b: Range<usize>,
}

pub fn split_nested(split: &CrossFitSplit, fold: FoldId, n: usize) -> Result<NestedSplit> {
    let fold_range = split.labeled(fold);
    let size = fold_range.len();
    if size < 2 {
        return Err(Error::FoldTooSmall(format!(
            "nested split needs a fold with at least 2 labeled rows, got {size}"
        )));
    }
    let a = (n / 4).min(size - 1).max(1);
    Ok(NestedSplit {
        part_a: fold_range.start..fold_range.start + a,
        part_b: fold_range.start + a..fold_range.end,
    })
}

/// Expected response layout of the labeled CSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResponseKind {
    /// Accept either `y` or `y1`,`y2` headers.
    #[default]
    Auto,
    Scalar,
    Bivariate,
}

#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub response: ResponseKind,
}

/// Load a dataset from CSV files with header rows.
///
/// Labeled file columns: `y` (or `y1`,`y2`) plus covariates `x1..xd`.
/// Unlabeled file columns: `x1..xd` only. Row order is preserved; split
/// determinism depends on it. Missing response cells are an error, never
/// silently treated as unlabeled.
pub fn load_dataset(
    labeled_path: &Path,
    unlabeled_path: Option<&Path>,
    schema: &CsvSchema,
) -> Result<SemiDataset> {
    let (header, records) = read_csv(labeled_path)?;
    let layout = LabeledLayout::from_header(&header, schema.response)?;
    let mut ys = Vec::with_capacity(records.len());
    let mut xs = Vec::with_capacity(records.len());
    for (row, rec) in records.iter().enumerate() {
        ys.push(parse_row(rec, &layout.y_cols, &header, row)?);
        xs.push(parse_row(rec, &layout.x_cols, &header, row)?);
    }
    if xs.is_empty() {
        return Err(Error::EmptyData("labeled file has zero data rows"));
    }
    let d = layout.x_cols.len();

    let unlabeled_x = match unlabeled_path {
        None => Matrix::empty(d),
        Some(path) => {
            let (uheader, urecords) = read_csv(path)?;
            let x_cols = covariate_columns(&uheader)?;
            if x_cols.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: x_cols.len(),
                });
            }
            let mut uxs = Vec::with_capacity(urecords.len());
            for (row, rec) in urecords.iter().enumerate() {
                uxs.push(parse_row(rec, &x_cols, &uheader, row)?);
            }
            if uxs.is_empty() {
                Matrix::empty(d)
            } else {
                Matrix::from_rows(&uxs)?
            }
        }
    };

    SemiDataset::new(Matrix::from_rows(&xs)?, Matrix::from_rows(&ys)?, unlabeled_x)
}

/// Write a dataset in the canonical round-trip format: shortest f64 decimal
/// representation, `y`/`y1,y2` then `x1..xd` headers.
pub fn save_dataset(
    ds: &SemiDataset,
    labeled_path: &Path,
    unlabeled_path: Option<&Path>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(labeled_path)?;
    let mut header: Vec<String> = if ds.q() == 1 {
        vec!["y".into()]
    } else {
        (1..=ds.q()).map(|i| format!("y{i}")).collect()
    };
    header.extend((1..=ds.d()).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds.labeled_y().row(i).iter().map(|v| v.to_string()).collect();
        rec.extend(ds.labeled_x().row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    if let Some(path) = unlabeled_path {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<String> = (1..=ds.d()).map(|i| format!("x{i}")).collect();
        w.write_record(&header)?;
        for i in 0..ds.m() {
            let rec: Vec<String> = ds
                .unlabeled_x()
                .row(i)
                .iter()
                .map(|v| v.to_string())
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

struct LabeledLayout {
    y_cols: Vec<usize>,
    x_cols: Vec<usize>,
}

impl LabeledLayout {
    fn from_header(header: &[String], response: ResponseKind) -> Result<Self> {
        let find = |name: &str| header.iter().position(|h| h == name);
        let y_cols = match response {
            ResponseKind::Scalar => vec![find("y").ok_or_else(|| Error::MissingColumn("y".into()))?],
            ResponseKind::Bivariate => vec![
                find("y1").ok_or_else(|| Error::MissingColumn("y1".into()))?,
                find("y2").ok_or_else(|| Error::MissingColumn("y2".into()))?,
            ],
            ResponseKind::Auto => {
                if let Some(c) = find("y") {
                    vec![c]
                } else if let (Some(c1), Some(c2)) = (find("y1"), find("y2")) {
                    vec![c1, c2]
                } else {
                    return Err(Error::MissingColumn("y (or y1,y2)".into()));
                }
            }
        };
        let x_cols = covariate_columns(header)?;
        let known = y_cols.len() + x_cols.len();
        if known != header.len() {
            let extra = header
                .iter()
                .enumerate()
                .find(|(i, _)| !y_cols.contains(i) && !x_cols.contains(i))
                .map(|(_, h)| h.clone())
                .unwrap_or_default();
            return Err(Error::InvalidParam(format!(
                "unexpected column `{extra}` (expected y / y1,y2 and x1..xd)"
            )));
        }
        Ok(Self { y_cols, x_cols })
    }
}

/// Positions of `x1..xd` in order; the x-columns must be exactly `x1..=xd`.
fn covariate_columns(header: &[String]) -> Result<Vec<usize>> {
    let mut indexed: Vec<(usize, usize)> = Vec::new();
    for (pos, h) in header.iter().enumerate() {
        if let Some(num) = h.strip_prefix('x') {
            if let Ok(k) = num.parse::<usize>() {
                if k >= 1 {
                    indexed.push((k, pos));
                    continue;
                }
            }
            return Err(Error::InvalidParam(format!("bad covariate column `{h}`")));
        }
    }
    indexed.sort_unstable();
    if indexed.is_empty() {
        return Err(Error::MissingColumn("x1".into()));
    }
    for (want, (k, _)) in indexed.iter().enumerate() {
        if *k != want + 1 {
            return Err(Error::MissingColumn(format!("x{}", want + 1)));
        }
    }
    Ok(indexed.into_iter().map(|(_, pos)| pos).collect())
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut records = Vec::new();
    for rec in reader.records() {
        records.push(rec?);
    }
    Ok((header, records))
}

fn parse_row(
    rec: &csv::StringRecord,
    cols: &[usize],
    header: &[String],
    row: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(cols.len());
    for &c in cols {
        let raw = rec.get(c).unwrap_or("").trim();
        let value: f64 = raw.parse().map_err(|_| Error::NonNumeric {
            row,
            col: header[c].clone(),
            value: raw.to_string(),
        })?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                row,
                col: header[c].clone(),
            });
        }
        out.push(value);
    }
    Ok(out)
}
