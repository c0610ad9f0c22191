//! Observed data `(Y, T, X)`, CSV ingestion and covariate standardization.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Treatment arm label.
pub type Arm = u8;

/// Outcome vector, binary treatment vector and covariate matrix with column names.
///
/// Immutable once built; every estimation entry point borrows it read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    t: Vec<Arm>,
    x: DMatrix<f64>,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, t: Vec<Arm>, x: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::Domain(format!("need at least 2 observations, got {n}")));
        }
        if t.len() != n || x.nrows() != n {
            return Err(Error::Schema(format!(
                "length mismatch: y has {n} rows, t has {}, x has {}",
                t.len(),
                x.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::Schema("at least one covariate is required".into()));
        }
        if names.len() != x.ncols() {
            return Err(Error::Schema(format!(
                "{} covariate names for {} columns",
                names.len(),
                x.ncols()
            )));
        }
        if let Some(i) = t.iter().position(|&v| v > 1) {
            return Err(Error::Domain(format!("treatment value {} at row {} is not 0 or 1", t[i], i + 1)));
        }
        let mut bad = Vec::new();
        for (i, v) in y.iter().enumerate() {
            if !v.is_finite() {
                bad.push((i + 1, "outcome".to_string()));
            }
        }
        for j in 0..x.ncols() {
            for i in 0..n {
                if !x[(i, j)].is_finite() {
                    bad.push((i + 1, names[j].clone()));
                }
            }
        }
        if !bad.is_empty() {
            return Err(Error::MissingValues(bad));
        }
        Ok(Self { y, t, x, names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn t(&self) -> &[Arm] {
        &self.t
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Covariate column `j` as a contiguous slice.
    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.x.as_slice()[j * n..(j + 1) * n]
    }

    /// Number of observations in arm 0 and arm 1.
    pub fn arm_counts(&self) -> [usize; 2] {
        let treated = self.t.iter().filter(|&&v| v == 1).count();
        [self.n() - treated, treated]
    }

    /// Errors unless both arms have at least one member.
    pub fn require_both_arms(&self) -> Result<()> {
        let [c0, c1] = self.arm_counts();
        if c0 == 0 || c1 == 0 {
            return Err(Error::Estimation(format!(
                "both treatment arms must be non-empty (arm 0: {c0}, arm 1: {c1})"
            )));
        }
        Ok(())
    }

    /// Same covariates and treatment with a different outcome vector.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(y, self.t.clone(), self.x.clone(), self.names.clone())
    }

    /// Same covariates and outcome with a different treatment vector.
    pub fn with_treatment(&self, t: Vec<Arm>) -> Result<Self> {
        Self::new(self.y.clone(), t, self.x.clone(), self.names.clone())
    }

    /// Keeps the listed covariate columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let x = self.x.select_columns(cols);
        let names = cols.iter().map(|&j| self.names[j].clone()).collect();
        Self::new(self.y.clone(), self.t.clone(), x, names)
    }
}

/// Which covariate columns to read from a CSV file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Covariates {
    /// Every column other than the outcome and treatment, in file order.
    AllOthers,
    Named(Vec<String>),
}

pub fn load_csv(path: impl AsRef<Path>, outcome: &str, treatment: &str, covariates: &Covariates) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("cannot open {}: {e}", path.display())))?;
    read_csv(file, outcome, treatment, covariates)
}

/// Reads a header-first, comma-separated table. Empty, `NA` and non-finite cells are rejected.
pub fn read_csv<R: Read>(reader: R, outcome: &str, treatment: &str, covariates: &Covariates) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    };
    let y_col = find(outcome)?;
    let t_col = find(treatment)?;
    if y_col == t_col {
        return Err(Error::Schema("outcome and treatment must be different columns".into()));
    }
    let x_cols: Vec<usize> = match covariates {
        Covariates::AllOthers => (0..header.len()).filter(|&j| j != y_col && j != t_col).collect(),
        Covariates::Named(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
    };
    if x_cols.is_empty() {
        return Err(Error::Schema("no covariate columns selected".into()));
    }

    let p = x_cols.len();
    let mut y = Vec::new();
    let mut t = Vec::new();
    let mut xs: Vec<Vec<f64>> = vec![Vec::new(); p];
    let mut missing = Vec::new();

    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let mut cell = |col: usize| -> Result<f64> {
            let raw = rec.get(col).unwrap_or("");
            match parse_cell(raw) {
                Cell::Value(v) => Ok(v),
                Cell::Missing => {
                    missing.push((row, header[col].clone()));
                    Ok(f64::NAN)
                }
                Cell::Invalid => Err(Error::Parse {
                    row,
                    column: header[col].clone(),
                    value: raw.to_string(),
                }),
            }
        };
        y.push(cell(y_col)?);
        let tv = cell(t_col)?;
        for (k, &col) in x_cols.iter().enumerate() {
            xs[k].push(cell(col)?);
        }
        let arm = if tv == 0.0 {
            0
        } else if tv == 1.0 {
            1
        } else if tv.is_nan() {
            0
        } else {
            return Err(Error::Domain(format!(
                "treatment column '{treatment}' has value {tv} at row {row}; expected 0 or 1"
            )));
        };
        t.push(arm);
    }
    if !missing.is_empty() {
        return Err(Error::MissingValues(missing));
    }
    let n = y.len();
    let x = DMatrix::from_iterator(n, p, xs.into_iter().flatten());
    let names = x_cols.iter().map(|&j| header[j].clone()).collect();
    Dataset::new(y, t, x, names)
}

enum Cell {
    Value(f64),
    Missing,
    Invalid,
}

fn parse_cell(raw: &str) -> Cell {
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
        return Cell::Missing;
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Cell::Value(v),
        Ok(_) => Cell::Missing,
        Err(_) => Cell::Invalid,
    }
}

/// Writes the dataset with shortest round-trip decimal formatting.
pub fn write_csv<W: Write>(d: &Dataset, writer: W, outcome: &str, treatment: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![outcome.to_string(), treatment.to_string()];
    header.extend(d.names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..d.n() {
        let mut rec = Vec::with_capacity(d.p() + 2);
        rec.push(format!("{}", d.y()[i]));
        rec.push(format!("{}", d.t()[i]));
        for j in 0..d.p() {
            rec.push(format!("{}", d.x()[(i, j)]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(d: &Dataset, path: impl AsRef<Path>, outcome: &str, treatment: &str) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv(d, std::io::BufWriter::new(file), outcome, treatment)
}

/// Column means and sample SDs (divisor `n - 1`) of the retained covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    /// Indices into the original covariate columns that survived.
    pub kept: Vec<usize>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Names of zero-variance columns that were dropped.
    pub dropped: Vec<String>,
    pub warnings: Vec<String>,
}

impl Standardization {
    /// Maps slopes on the standardized scale back to the original covariate scale.
    ///
    /// Returns the adjusted intercept and a slope vector aligned with the original columns
    /// (dropped columns get 0).
    pub fn unscale(&self, intercept: f64, slopes: &[f64], p_original: usize) -> (f64, Vec<f64>) {
        let mut out = vec![0.0; p_original];
        let mut b0 = intercept;
        for (k, &j) in self.kept.iter().enumerate() {
            out[j] = slopes[k] / self.sds[k];
            b0 -= out[j] * self.means[k];
        }
        (b0, out)
    }
}

/// Centers and scales every covariate to sample mean 0 and SD 1.
///
/// Zero-variance columns are dropped with a warning; it is an error if none survive.
pub fn standardize(d: &Dataset) -> Result<(Dataset, Standardization)> {
    let n = d.n();
    let mut kept = Vec::new();
    let mut means = Vec::new();
    let mut sds = Vec::new();
    let mut dropped = Vec::new();
    let mut warnings = Vec::new();
    let mut cols = Vec::new();
    for j in 0..d.p() {
        let c = d.column(j);
        let m = stats::mean(c);
        let sd = stats::sample_sd(c);
        if !(sd > 0.0) || sd <= 1e-12 * m.abs() {
            dropped.push(d.names()[j].clone());
            warnings.push(format!("covariate '{}' has zero variance and was dropped", d.names()[j]));
            continue;
        }
        kept.push(j);
        means.push(m);
        sds.push(sd);
        cols.extend(c.iter().map(|v| (v - m) / sd));
    }
    if kept.is_empty() {
        return Err(Error::DegenerateDesign("every covariate has zero variance".into()));
    }
    let x = DMatrix::from_vec(n, kept.len(), cols);
    let names = kept.iter().map(|&j| d.names()[j].clone()).collect();
    let out = Dataset::new(d.y().to_vec(), d.t().to_vec(), x, names)?;
    Ok((out, Standardization { kept, means, sds, dropped, warnings }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        Dataset::new(vec![0.1, 0.2, 0.3], vec![0, 1, 1], x, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn reads_small_file() {
        let src = "Y,T,X1,X2\n1.5,1,0.1,2\n2,0,0.3,1\n-1,1,2.5,0\n0,0,1,1\n";
        let d = read_csv(src.as_bytes(), "Y", "T", &Covariates::AllOthers).unwrap();
        assert_eq!((d.n(), d.p()), (4, 2));
        assert_eq!(d.names(), ["X1", "X2"]);
        assert_eq!(d.t(), [1, 0, 1, 0]);
        assert_eq!(d.column(0), [0.1, 0.3, 2.5, 1.0]);
    }

    #[test]
    fn named_covariates_keep_declared_order() {
        let src = "X1,Y,X2,T\n1,2,3,0\n4,5,6,1\n";
        let named = Covariates::Named(vec!["X2".into(), "X1".into()]);
        let d = read_csv(src.as_bytes(), "Y", "T", &named).unwrap();
        assert_eq!(d.names(), ["X2", "X1"]);
        assert_eq!(d.column(0), [3.0, 6.0]);
    }

    #[test]
    fn treatment_outside_binary_is_domain_error() {
        let src = "Y,T,X1\n1,0,1\n2,2,3\n";
        let err = read_csv(src.as_bytes(), "Y", "T", &Covariates::AllOthers).unwrap_err();
        assert!(matches!(err, Error::Domain(_)), "{err}");
    }

    #[test]
    fn missing_column_is_schema_error() {
        let src = "Y,X1\n1,0\n2,3\n";
        let err = read_csv(src.as_bytes(), "Y", "T", &Covariates::AllOthers).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn non_numeric_cell_reports_position() {
        let src = "Y,T,X1\n1,0,1\n2,1,abc\n";
        match read_csv(src.as_bytes(), "Y", "T", &Covariates::AllOthers).unwrap_err() {
            Error::Parse { row, column, .. } => assert_eq!((row, column.as_str()), (2, "X1")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_cells_are_listed() {
        let src = "Y,T,X1,X2\n1,0,,2\nNA,1,3,NaN\n";
        match read_csv(src.as_bytes(), "Y", "T", &Covariates::AllOthers).unwrap_err() {
            Error::MissingValues(cells) => {
                assert_eq!(cells.len(), 3);
                assert!(cells.contains(&(1, "X1".to_string())));
                assert!(cells.contains(&(2, "Y".to_string())));
                assert!(cells.contains(&(2, "X2".to_string())));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn standardize_centers_scales_and_drops_constants() {
        let (s, info) = standardize(&toy()).unwrap();
        assert_eq!(s.p(), 1);
        assert_eq!(info.dropped, ["b"]);
        assert_eq!(info.warnings.len(), 1);
        let c = s.column(0);
        for (got, want) in c.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(s.y(), toy().y());
        assert_eq!(s.t(), toy().t());
    }

    #[test]
    fn all_constant_columns_are_degenerate() {
        let x = DMatrix::from_element(3, 2, 4.0);
        let d = Dataset::new(vec![1.0, 2.0, 3.0], vec![0, 1, 0], x, vec!["a".into(), "b".into()]).unwrap();
        assert!(matches!(standardize(&d), Err(Error::DegenerateDesign(_))));
    }

    #[test]
    fn unscale_recovers_original_coefficients() {
        let x = DMatrix::from_row_slice(4, 1, &[1.0, 4.0, 2.0, 9.0]);
        let d = Dataset::new(vec![0.0; 4], vec![0, 1, 0, 1], x, vec!["a".into()]).unwrap();
        let (s, info) = standardize(&d).unwrap();
        // eta = 0.3 + 2 z  with z standardized, expressed on the raw scale
        let (b0, b) = info.unscale(0.3, &[2.0], 1);
        for i in 0..4 {
            let raw = b0 + b[0] * d.x()[(i, 0)];
            let std = 0.3 + 2.0 * s.x()[(i, 0)];
            assert!((raw - std).abs() < 1e-12);
        }
    }
}
