//! Core domain types: site datasets, coefficient vectors, fit results, and
//! the dataset file formats (CSV and a compact little-endian binary layout).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SashError};

/// Individual-level data held by one site.
///
/// Labeled rows, when present, occupy the first `n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    s: Array1<f64>,
    y: Option<Array1<f64>>,
    site_id: usize,
}

impl Dataset {
    pub fn new(
        x: Array2<f64>,
        s: Array1<f64>,
        y: Option<Array1<f64>>,
        site_id: usize,
    ) -> Result<Self> {
        if x.nrows() != s.len() {
            return Err(SashError::Dimension(format!(
                "design has {} rows but surrogate has {} entries",
                x.nrows(),
                s.len()
            )));
        }
        if x.ncols() == 0 {
            return Err(SashError::Dimension("design has no covariates".into()));
        }
        if let Some((i, j)) = first_non_finite(x.view()) {
            return Err(SashError::Parse {
                row: i,
                column: format!("x{}", j + 1),
                message: "non-finite covariate".into(),
            });
        }
        if let Some(i) = s.iter().position(|v| !v.is_finite()) {
            return Err(SashError::Parse {
                row: i,
                column: "s".into(),
                message: "non-finite surrogate".into(),
            });
        }
        if let Some(y) = &y {
            if y.len() > x.nrows() {
                return Err(SashError::Dimension(format!(
                    "{} labels for {} rows",
                    y.len(),
                    x.nrows()
                )));
            }
            if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(SashError::Parse {
                    row: i,
                    column: "y".into(),
                    message: format!("label {} is not binary", y[i]),
                });
            }
        }
        Ok(Self { x, s, y, site_id })
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn s(&self) -> ArrayView1<'_, f64> {
        self.s.view()
    }

    pub fn y(&self) -> Option<ArrayView1<'_, f64>> {
        self.y.as_ref().map(|y| y.view())
    }

    pub fn site_id(&self) -> usize {
        self.site_id
    }

    /// Total number of rows `N`.
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of labeled rows `n` (zero when no labels are present).
    pub fn n_labeled(&self) -> usize {
        self.y.as_ref().map_or(0, |y| y.len())
    }

    /// The labeled subset as its own dataset (every row labeled).
    pub fn labeled(&self) -> Result<Dataset> {
        let n = self.n_labeled();
        if n == 0 {
            return Err(SashError::Empty(format!(
                "site {} carries no labels",
                self.site_id
            )));
        }
        let rows: Vec<usize> = (0..n).collect();
        self.select_rows(&rows)
    }

    /// Same rows with the labels dropped.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            x: self.x.clone(),
            s: self.s.clone(),
            y: None,
            site_id: self.site_id,
        }
    }

    /// Rows in the given order. Labels are kept only if every selected row is
    /// labeled and the labeled rows come first.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_rows()) {
            return Err(SashError::InvalidInput(format!("row {bad} out of range")));
        }
        let x = self.x.select(Axis(0), rows);
        let s = self.s.select(Axis(0), rows);
        let n = self.n_labeled();
        let y = match &self.y {
            Some(y) => {
                let labeled: Vec<usize> = rows.iter().copied().take_while(|&r| r < n).collect();
                if labeled.is_empty() {
                    None
                } else {
                    Some(y.select(Axis(0), &labeled))
                }
            }
            None => None,
        };
        Dataset::new(x, s, y, self.site_id)
    }

    pub fn with_site_id(mut self, site_id: usize) -> Self {
        self.site_id = site_id;
        self
    }

    pub fn into_parts(self) -> (Array2<f64>, Array1<f64>, Option<Array1<f64>>) {
        (self.x, self.s, self.y)
    }
}

fn first_non_finite(x: ArrayView2<'_, f64>) -> Option<(usize, usize)> {
    x.indexed_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(ij, _)| ij)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoefKind {
    Beta,
    Direction,
}

/// A `p`-vector of coefficients. Direction vectors have first entry exactly 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    values: Array1<f64>,
    kind: CoefKind,
}

impl CoefficientVector {
    pub fn beta(values: Array1<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self {
            values,
            kind: CoefKind::Beta,
        })
    }

    pub fn direction(values: Array1<f64>) -> Result<Self> {
        check_finite(&values)?;
        match values.first() {
            Some(&1.0) => Ok(Self {
                values,
                kind: CoefKind::Direction,
            }),
            Some(&v) => Err(SashError::InvalidInput(format!(
                "direction vector must have first entry 1, got {v}"
            ))),
            None => Err(SashError::Empty("direction vector".into())),
        }
    }

    /// `beta / beta[0]`, with the first entry set to exactly 1.
    pub fn direction_from_beta(beta: ArrayView1<'_, f64>) -> Result<Self> {
        let anchor = *beta
            .first()
            .ok_or_else(|| SashError::Empty("coefficient vector".into()))?;
        if anchor == 0.0 || !anchor.is_finite() {
            return Err(SashError::InvalidInput(format!(
                "cannot normalize by anchor coefficient {anchor}"
            )));
        }
        let mut values = beta.mapv(|b| b / anchor);
        values[0] = 1.0;
        Self::direction(values)
    }

    /// The unit vector e1 in `p` dimensions.
    pub fn e1(p: usize) -> Self {
        let mut values = Array1::zeros(p);
        values[0] = 1.0;
        Self {
            values,
            kind: CoefKind::Direction,
        }
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.values.view()
    }

    pub fn kind(&self) -> CoefKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.values
    }
}

fn check_finite(values: &Array1<f64>) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(SashError::InvalidInput(format!(
            "coefficient {i} is not finite"
        )));
    }
    Ok(())
}

/// Run metadata attached to estimates.
pub type Diagnostics = BTreeMap<String, serde_json::Value>;

/// Final estimate `beta = beta1 * gamma_dagger` with its components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub alpha: f64,
    pub beta1: f64,
    pub gamma_dagger: CoefficientVector,
    pub beta_sash: CoefficientVector,
    pub diagnostics: Diagnostics,
}

impl FitResult {
    pub fn assemble(
        gamma_dagger: CoefficientVector,
        alpha: f64,
        beta1: f64,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        if gamma_dagger.kind() != CoefKind::Direction {
            return Err(SashError::InvalidInput(
                "final direction must be a direction vector".into(),
            ));
        }
        if !alpha.is_finite() || !beta1.is_finite() {
            return Err(SashError::InvalidInput(format!(
                "non-finite scale estimates (alpha={alpha}, beta1={beta1})"
            )));
        }
        let beta = gamma_dagger.values().mapv(|g| beta1 * g);
        Ok(Self {
            alpha,
            beta1,
            beta_sash: CoefficientVector::beta(beta)?,
            gamma_dagger,
            diagnostics,
        })
    }
}

/// Column mapping for CSV input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub surrogate: String,
    pub label: Option<String>,
    /// Covariate columns in order; `None` takes every remaining column.
    pub covariates: Option<Vec<String>>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            surrogate: "s".into(),
            label: Some("y".into()),
            covariates: None,
        }
    }
}

/// Reads a CSV file with a header row. Empty label cells mark unlabeled rows;
/// labeled rows must be contiguous at the top.
pub fn load_dataset(path: &Path, schema: &ColumnSchema, site_id: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SashError::Parse {
                row: 0,
                column: name.to_string(),
                message: "column missing from header".into(),
            })
    };
    let s_col = find(&schema.surrogate)?;
    let y_col = match &schema.label {
        Some(name) => headers.iter().position(|h| h == name),
        None => None,
    };
    let x_cols: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|&c| c != s_col && Some(c) != y_col)
            .collect(),
    };
    let p = x_cols.len();

    let mut xs: Vec<f64> = Vec::new();
    let mut s: Vec<f64> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    let mut labels_ended = false;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(SashError::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let parse = |c: usize| -> Result<f64> {
            let raw = &record[c];
            let v: f64 = raw.parse().map_err(|_| SashError::Parse {
                row,
                column: headers[c].to_string(),
                message: format!("cannot parse `{raw}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(SashError::Parse {
                    row,
                    column: headers[c].to_string(),
                    message: format!("non-finite value `{raw}`"),
                });
            }
            Ok(v)
        };
        for &c in &x_cols {
            xs.push(parse(c)?);
        }
        s.push(parse(s_col)?);
        if let Some(c) = y_col {
            if record[c].is_empty() {
                labels_ended = true;
            } else {
                if labels_ended {
                    return Err(SashError::Parse {
                        row,
                        column: headers[c].to_string(),
                        message: "labeled rows must be contiguous at the top".into(),
                    });
                }
                let v = parse(c)?;
                if v != 0.0 && v != 1.0 {
                    return Err(SashError::Parse {
                        row,
                        column: headers[c].to_string(),
                        message: format!("label `{}` is not binary", &record[c]),
                    });
                }
                y.push(v);
            }
        }
    }
    let n_rows = s.len();
    let x = Array2::from_shape_vec((n_rows, p), xs)
        .map_err(|e| SashError::Dimension(e.to_string()))?;
    let y = if y.is_empty() {
        None
    } else {
        Some(Array1::from(y))
    };
    Dataset::new(x, Array1::from(s), y, site_id)
}

/// Writes `y,s,x1..xp`. Values use the shortest decimal form that parses
/// back to the same bits.
pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = vec!["y".to_string(), "s".to_string()];
    header.extend((1..=d.p()).map(|j| format!("x{j}")));
    writeln!(w, "{}", header.join(","))?;
    let n = d.n_labeled();
    for i in 0..d.n_rows() {
        let mut line = String::new();
        if i < n {
            line.push_str(&format!("{}", d.y.as_ref().unwrap()[i]));
        }
        line.push_str(&format!(",{}", d.s[i]));
        for v in d.x.row(i) {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

const BINARY_MAGIC: &[u8; 8] = b"SASHDATA";

/// Binary layout: 32-byte header (magic, N, p, n as little-endian u64), then
/// X row-major, S, and the n labels, all little-endian f64.
pub fn save_dataset_binary(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BINARY_MAGIC)?;
    for v in [d.n_rows(), d.p(), d.n_labeled()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for v in d.x.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in d.s.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(y) = &d.y {
        for v in y.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset_binary(path: &Path, site_id: usize) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 32];
    r.read_exact(&mut header)
        .map_err(|_| SashError::InvalidInput("binary dataset header truncated".into()))?;
    if &header[..8] != BINARY_MAGIC {
        return Err(SashError::InvalidInput("bad binary dataset magic".into()));
    }
    let field = |k: usize| u64::from_le_bytes(header[8 + 8 * k..16 + 8 * k].try_into().unwrap());
    let (n_rows, p, n) = (field(0) as usize, field(1) as usize, field(2) as usize);
    let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf)
            .map_err(|_| SashError::InvalidInput("binary dataset body truncated".into()))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let x = Array2::from_shape_vec((n_rows, p), read_f64s(n_rows * p)?)
        .map_err(|e| SashError::Dimension(e.to_string()))?;
    let s = Array1::from(read_f64s(n_rows)?);
    let y = if n > 0 {
        Some(Array1::from(read_f64s(n)?))
    } else {
        None
    };
    Dataset::new(x, s, y, site_id)
}

/// Per-column affine map applied by [`standardize_columns`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Scaling {
    /// Maps coefficients fitted on standardized columns back to the original
    /// scale; returns `(alpha, beta)` so that predictions are unchanged.
    pub fn unscale_beta(&self, alpha: f64, beta: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
        let b: Array1<f64> = beta
            .iter()
            .zip(&self.sds)
            .map(|(b, sd)| b / sd)
            .collect();
        let shift: f64 = b.iter().zip(&self.means).map(|(b, m)| b * m).sum();
        (alpha - shift, b)
    }

    /// Maps a standardized-scale direction back to an original-scale direction.
    pub fn unscale_direction(&self, gamma: &CoefficientVector) -> Result<CoefficientVector> {
        let (_, beta) = self.unscale_beta(0.0, gamma.values());
        CoefficientVector::direction_from_beta(beta.view())
    }
}

/// Centers and scales every covariate to unit sample SD. The first covariate
/// (the anchor) is scaled but not centered. Columns listed in
/// `constant_columns` pass through unchanged with sd recorded as 1.
pub fn standardize_columns(d: &Dataset, constant_columns: &[usize]) -> Result<(Dataset, Scaling)> {
    let n_rows = d.n_rows();
    if n_rows < 2 {
        return Err(SashError::InvalidInput(
            "standardization needs at least two rows".into(),
        ));
    }
    let mut x = d.x.clone();
    let mut means = Vec::with_capacity(d.p());
    let mut sds = Vec::with_capacity(d.p());
    for (j, mut col) in x.axis_iter_mut(Axis(1)).enumerate() {
        let mean = col.sum() / n_rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_rows - 1) as f64;
        let sd = var.sqrt();
        if constant_columns.contains(&j) {
            means.push(0.0);
            sds.push(1.0);
            continue;
        }
        if sd <= f64::EPSILON * mean.abs().max(1.0) {
            return Err(SashError::InvalidInput(format!(
                "column x{} has zero variance and is not flagged constant",
                j + 1
            )));
        }
        let center = if j == 0 { 0.0 } else { mean };
        col.mapv_inplace(|v| (v - center) / sd);
        means.push(center);
        sds.push(sd);
    }
    let out = Dataset::new(x, d.s.clone(), d.y.clone(), d.site_id)?;
    Ok((out, Scaling { means, sds }))
}
