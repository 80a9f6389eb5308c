//! Time-series container, CSV I/O, lag embedding, deseasonalization.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Continuous,
    Binary,
    /// Exact zeros with positive probability plus a continuous part;
    /// modeled as a zero indicator followed by a continuous density on the
    /// nonzero rows.
    Semicontinuous,
}

/// T x d matrix of observations, row t = X_t.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub values: Mat,
    pub column_types: Vec<ColumnType>,
}

impl TimeSeries {
    pub fn new(values: Mat) -> Result<Self> {
        let types = vec![ColumnType::Continuous; values.cols()];
        TimeSeries::with_types(values, types)
    }

    pub fn with_types(values: Mat, column_types: Vec<ColumnType>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Input("time series must be nonempty".into()));
        }
        if column_types.len() != values.cols() {
            return Err(Error::Contract(format!(
                "column_types length {} != {} columns",
                column_types.len(),
                values.cols()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Input("time series contains non-finite entries".into()));
        }
        for (j, ty) in column_types.iter().enumerate() {
            if *ty == ColumnType::Binary {
                for t in 0..values.rows() {
                    let v = values.get(t, j);
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::Input(format!(
                            "binary column {j} contains value {v} at row {t}"
                        )));
                    }
                }
            }
        }
        Ok(TimeSeries { values, column_types })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    /// Parse CSV: one row per time point, '.' decimal, optional header
    /// detected by a non-numeric first row. NaN and blank cells are rejected.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut row = Vec::with_capacity(rec.len());
            let mut bad: Option<usize> = None;
            for (j, field) in rec.iter().enumerate() {
                match field.parse::<f64>() {
                    Ok(v) if v.is_finite() => row.push(v),
                    _ => {
                        bad = Some(j);
                        break;
                    }
                }
            }
            match bad {
                None => rows.push(row),
                Some(j) if i == 0 && rows.is_empty() => {
                    // header row
                    let _ = j;
                }
                Some(j) => {
                    return Err(Error::Input(format!(
                        "row {}, column {}: cell {:?} is not a finite number",
                        i + 1,
                        j + 1,
                        rec.get(j).unwrap_or("")
                    )));
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::Input("CSV contains no data rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("CSV rows have inconsistent widths".into()));
        }
        TimeSeries::new(Mat::from_rows(&rows))
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_csv_reader(std::io::BufReader::new(f))
    }

    pub fn to_csv_writer<W: Write>(&self, mut w: W) -> Result<()> {
        for t in 0..self.len() {
            let line = self
                .row(t)
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.to_csv_writer(std::io::BufWriter::new(f))
    }
}

/// Lag embedding: output row t = (X_t, X_{t+1}, ..., X_{t+k-1}), so the
/// result has length T-k+1 and dimension d*k.
pub fn embed(series: &TimeSeries, k: usize) -> Result<TimeSeries> {
    if k < 1 {
        return Err(Error::Input("embedding order k must be >= 1".into()));
    }
    if k > series.len() {
        return Err(Error::Input(format!(
            "embedding order {k} exceeds series length {}",
            series.len()
        )));
    }
    if k == 1 {
        return Ok(series.clone());
    }
    let t_out = series.len() - k + 1;
    let d = series.dim();
    let mut out = Mat::zeros(t_out, d * k);
    for t in 0..t_out {
        let row = out.row_mut(t);
        for j in 0..k {
            row[j * d..(j + 1) * d].copy_from_slice(series.row(t + j));
        }
    }
    let mut types = Vec::with_capacity(d * k);
    for _ in 0..k {
        types.extend_from_slice(&series.column_types);
    }
    TimeSeries::with_types(out, types)
}

/// Subtract the per-column mean over rows in the same phase modulo `period`.
pub fn deseason(series: &TimeSeries, period: usize) -> Result<TimeSeries> {
    if period == 0 || period > series.len() {
        return Err(Error::Config(format!(
            "period must be in [1, {}], got {period}",
            series.len()
        )));
    }
    let d = series.dim();
    let t_len = series.len();
    let mut sums = vec![vec![0.0; d]; period];
    let mut counts = vec![0usize; period];
    for t in 0..t_len {
        let ph = t % period;
        counts[ph] += 1;
        for j in 0..d {
            sums[ph][j] += series.values.get(t, j);
        }
    }
    let mut out = series.values.clone();
    for t in 0..t_len {
        let ph = t % period;
        let c = counts[ph] as f64;
        for j in 0..d {
            let v = out.get(t, j) - sums[ph][j] / c;
            out.set(t, j, v);
        }
    }
    TimeSeries::new(out)
}
