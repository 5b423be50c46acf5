//! Experiment data: loading, validation, and cell summaries.
//!
//! `ExperimentData` is immutable after construction and is the single source
//! of truth the fitting, estimation, and diagnostic modules read. The outcome
//! column is optional so score-only workflows never touch outcomes;
//! estimators reject data without it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read '{path}': {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column '{0}' in CSV header")]
    MissingColumn(String),
    #[error("row {row}, column '{column}': expected 0 or 1, found '{value}'")]
    NonBinary { row: usize, column: String, value: String },
    #[error("row {row}, column '{column}': expected a number, found '{value}'")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("treatment arm z={0} is empty")]
    EmptyArm(u8),
    #[error("dataset has no rows")]
    Empty,
    #[error(
        "covariate matrix is rank deficient: column '{column}' is linearly dependent on [{on}]"
    )]
    RankDeficient { column: String, on: String },
    #[error("declared intercept column '{0}' is not constant 1")]
    BadIntercept(String),
    #[error("columns {0} and {1} have different lengths")]
    LengthMismatch(String, String),
}

/// Maps CSV header names onto the z/s/y/covariate roles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub z: String,
    pub s: String,
    /// Outcome column; omit for score-only workflows.
    pub y: Option<String>,
    /// Covariate columns in order. Empty means: every column not mapped to
    /// another role, in header order.
    pub covariates: Vec<String>,
    /// When true, the first covariate column is already a constant-one
    /// intercept; otherwise an intercept column is prepended.
    pub has_intercept: bool,
}

/// Validated experiment table: treatment, intermediate, optional outcome,
/// and the covariate matrix with its leading intercept column.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    z: Vec<u8>,
    s: Vec<u8>,
    y: Option<Vec<f64>>,
    x: DMatrix<f64>,
    covariate_names: Vec<String>,
}

impl ExperimentData {
    /// Builds and validates a dataset. `x` must already carry the intercept
    /// as its first column; `covariate_names` labels every column of `x`.
    pub fn new(
        z: Vec<u8>,
        s: Vec<u8>,
        y: Option<Vec<f64>>,
        x: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let n = z.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        if s.len() != n {
            return Err(DataError::LengthMismatch("z".into(), "s".into()));
        }
        if let Some(y) = &y {
            if y.len() != n {
                return Err(DataError::LengthMismatch("z".into(), "y".into()));
            }
        }
        if x.nrows() != n {
            return Err(DataError::LengthMismatch("z".into(), "x".into()));
        }
        if covariate_names.len() != x.ncols() {
            return Err(DataError::LengthMismatch("x".into(), "covariate names".into()));
        }
        for (i, (&zi, &si)) in z.iter().zip(&s).enumerate() {
            if zi > 1 {
                return Err(DataError::NonBinary {
                    row: i + 1,
                    column: "z".into(),
                    value: zi.to_string(),
                });
            }
            if si > 1 {
                return Err(DataError::NonBinary {
                    row: i + 1,
                    column: "s".into(),
                    value: si.to_string(),
                });
            }
        }
        for arm in [0u8, 1u8] {
            if !z.iter().any(|&v| v == arm) {
                return Err(DataError::EmptyArm(arm));
            }
        }
        check_full_rank(&x, &covariate_names)?;
        Ok(ExperimentData { z, s, y, x, covariate_names })
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    /// Covariate width including the intercept column.
    pub fn width(&self) -> usize {
        self.x.ncols()
    }

    pub fn z(&self) -> &[u8] {
        &self.z
    }

    pub fn s(&self) -> &[u8] {
        &self.s
    }

    pub fn y(&self) -> Option<&[f64]> {
        self.y.as_deref()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        (0..self.x.ncols()).map(|j| self.x[(i, j)]).collect()
    }

    /// Indices of the `(z, s)` cell.
    pub fn cell_indices(&self, z: u8, s: u8) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.z[i] == z && self.s[i] == s).collect()
    }

    /// Indices of a whole treatment arm.
    pub fn arm_indices(&self, z: u8) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.z[i] == z).collect()
    }

    /// Counts of the four observed cells and the per-arm shares of `S = 1`.
    pub fn summarize(&self) -> CellSummary {
        let mut n = [[0usize; 2]; 2];
        for i in 0..self.n() {
            n[self.z[i] as usize][self.s[i] as usize] += 1;
        }
        let treated = n[1][0] + n[1][1];
        let control = n[0][0] + n[0][1];
        CellSummary {
            n_11: n[1][1],
            n_10: n[1][0],
            n_01: n[0][1],
            n_00: n[0][0],
            p1_hat: n[1][1] as f64 / treated as f64,
            p0_hat: n[0][1] as f64 / control as f64,
        }
    }

    /// New dataset with rows taken (with repetition allowed) at `indices`;
    /// used by the bootstrap. Skips re-validation of rank on the resample:
    /// fitting falls back to ridge if a resample degenerates.
    pub fn resample(&self, indices: &[usize]) -> ExperimentData {
        let x = DMatrix::from_fn(indices.len(), self.x.ncols(), |r, c| self.x[(indices[r], c)]);
        ExperimentData {
            z: indices.iter().map(|&i| self.z[i]).collect(),
            s: indices.iter().map(|&i| self.s[i]).collect(),
            y: self.y.as_ref().map(|y| indices.iter().map(|&i| y[i]).collect()),
            x,
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// New dataset keeping only the named covariate columns (the intercept is
    /// always kept). Used to hide covariates from an analysis.
    pub fn select_covariates(&self, keep: &[&str]) -> Result<ExperimentData, DataError> {
        let mut cols = vec![0usize];
        for name in keep {
            let j = self
                .covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| DataError::MissingColumn((*name).to_string()))?;
            if j != 0 {
                cols.push(j);
            }
        }
        let x = DMatrix::from_fn(self.n(), cols.len(), |r, c| self.x[(r, cols[c])]);
        ExperimentData::new(
            self.z.clone(),
            self.s.clone(),
            self.y.clone(),
            x,
            cols.iter().map(|&j| self.covariate_names[j].clone()).collect(),
        )
    }

    /// Drops the outcome column (score-only view of the same data).
    pub fn without_outcome(&self) -> ExperimentData {
        ExperimentData { y: None, ..self.clone() }
    }

    /// Serializes back to CSV with the same schema shape `load_csv` accepts,
    /// so a written dataset reloads identically.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let mut header = vec!["z".to_string(), "s".to_string()];
        if self.y.is_some() {
            header.push("y".into());
        }
        // Skip the synthesized intercept column on output.
        header.extend(self.covariate_names.iter().skip(1).cloned());
        let _ = writeln!(out, "{}", header.join(","));
        for i in 0..self.n() {
            let mut fields = vec![self.z[i].to_string(), self.s[i].to_string()];
            if let Some(y) = &self.y {
                fields.push(format!("{}", y[i]));
            }
            for j in 1..self.x.ncols() {
                fields.push(format!("{}", self.x[(i, j)]));
            }
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }

    /// Schema describing this dataset's own CSV serialization.
    pub fn csv_schema(&self) -> CsvSchema {
        CsvSchema {
            z: "z".into(),
            s: "s".into(),
            y: self.y.as_ref().map(|_| "y".to_string()),
            covariates: self.covariate_names.iter().skip(1).cloned().collect(),
            has_intercept: false,
        }
    }
}

/// Counts of the four `(z, s)` cells plus per-arm shares of `S = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub n_11: usize,
    pub n_10: usize,
    pub n_01: usize,
    pub n_00: usize,
    pub p1_hat: f64,
    pub p0_hat: f64,
}

impl CellSummary {
    pub fn cell_count(&self, z: u8, s: u8) -> usize {
        match (z, s) {
            (1, 1) => self.n_11,
            (1, 0) => self.n_10,
            (0, 1) => self.n_01,
            _ => self.n_00,
        }
    }
}

/// Loads and validates a CSV file. Row numbers in errors are 1-based data
/// rows, excluding the header.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<ExperimentData, DataError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    load_csv_str(&raw, schema)
}

/// Same as [`load_csv`] but from an in-memory string.
pub fn load_csv_str(raw: &str, schema: &CsvSchema) -> Result<ExperimentData, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(raw.as_bytes());
    let headers: Vec<String> =
        reader.headers()?.iter().map(|h| h.trim().to_string()).collect();

    let find = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };

    let z_idx = find(&schema.z)?;
    let s_idx = find(&schema.s)?;
    let y_idx = schema.y.as_ref().map(|y| find(y)).transpose()?;

    let covariate_names: Vec<String> = if schema.covariates.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != z_idx && *i != s_idx && Some(*i) != y_idx)
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        schema.covariates.clone()
    };
    let cov_idx: Vec<usize> =
        covariate_names.iter().map(|c| find(c)).collect::<Result<_, _>>()?;

    let mut z = Vec::new();
    let mut s = Vec::new();
    let mut y: Option<Vec<f64>> = y_idx.map(|_| Vec::new());
    let mut cov_rows: Vec<Vec<f64>> = Vec::new();

    for (row_i, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_i + 1;
        if record.len() != headers.len() {
            return Err(DataError::RaggedRow {
                row,
                expected: headers.len(),
                found: record.len(),
            });
        }
        let parse_binary = |idx: usize, column: &str| -> Result<u8, DataError> {
            match record[idx].trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(DataError::NonBinary {
                    row,
                    column: column.to_string(),
                    value: other.to_string(),
                }),
            }
        };
        let parse_num = |idx: usize, column: &str| -> Result<f64, DataError> {
            record[idx].trim().parse::<f64>().map_err(|_| DataError::NonNumeric {
                row,
                column: column.to_string(),
                value: record[idx].trim().to_string(),
            })
        };
        z.push(parse_binary(z_idx, &schema.z)?);
        s.push(parse_binary(s_idx, &schema.s)?);
        if let (Some(out), Some(idx)) = (y.as_mut(), y_idx) {
            out.push(parse_num(idx, schema.y.as_deref().unwrap())?);
        }
        cov_rows.push(
            cov_idx
                .iter()
                .zip(&covariate_names)
                .map(|(&idx, name)| parse_num(idx, name))
                .collect::<Result<Vec<f64>, _>>()?,
        );
    }
    if z.is_empty() {
        return Err(DataError::Empty);
    }

    let n = z.len();
    let (x, names) = if schema.has_intercept {
        let x = DMatrix::from_fn(n, cov_idx.len(), |r, c| cov_rows[r][c]);
        for i in 0..n {
            if x[(i, 0)] != 1.0 {
                return Err(DataError::BadIntercept(covariate_names[0].clone()));
            }
        }
        (x, covariate_names)
    } else {
        let x =
            DMatrix::from_fn(n, cov_idx.len() + 1, |r, c| if c == 0 { 1.0 } else { cov_rows[r][c - 1] });
        let mut names = vec!["(intercept)".to_string()];
        names.extend(covariate_names);
        (x, names)
    };

    ExperimentData::new(z, s, y, x, names)
}

/// Rank check by modified Gram-Schmidt elimination; on failure, the dependent
/// column is regressed on its predecessors to name the columns involved.
fn check_full_rank(x: &DMatrix<f64>, names: &[String]) -> Result<(), DataError> {
    let (n, p) = (x.nrows(), x.ncols());
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for j in 0..p {
        let mut col: Vec<f64> = (0..n).map(|i| x[(i, j)]).collect();
        let orig_norm = norm(&col).max(1e-300);
        for q in &basis {
            let proj: f64 = col.iter().zip(q).map(|(a, b)| a * b).sum();
            for (c, b) in col.iter_mut().zip(q) {
                *c -= proj * b;
            }
        }
        let res_norm = norm(&col);
        if res_norm <= 1e-10 * orig_norm {
            return Err(DataError::RankDeficient {
                column: names[j].clone(),
                on: dependent_columns(x, names, j).join(", "),
            });
        }
        for c in col.iter_mut() {
            *c /= res_norm;
        }
        basis.push(col);
    }
    Ok(())
}

/// Names the earlier columns with non-negligible coefficients when column `j`
/// is regressed on columns `0..j`.
fn dependent_columns(x: &DMatrix<f64>, names: &[String], j: usize) -> Vec<String> {
    let n = x.nrows();
    let sub = DMatrix::from_fn(n, j, |r, c| x[(r, c)]);
    let target: Vec<f64> = (0..n).map(|i| x[(i, j)]).collect();
    let gram = sub.transpose() * &sub;
    let mut damped = gram;
    for d in 0..j {
        damped[(d, d)] += 1e-10;
    }
    let rhs = sub.transpose() * DMatrix::from_column_slice(n, 1, &target);
    match damped.cholesky() {
        Some(chol) => {
            let coef = chol.solve(&rhs);
            (0..j)
                .filter(|&c| coef[(c, 0)].abs() > 1e-6)
                .map(|c| names[c].clone())
                .collect()
        }
        None => vec![],
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn schema() -> CsvSchema {
        CsvSchema {
            z: "z".into(),
            s: "s".into(),
            y: Some("y".into()),
            covariates: vec![],
            has_intercept: false,
        }
    }

    #[test]
    fn loads_four_row_csv() {
        let raw = "z,s,y,age\n1,1,2.5,30\n1,0,1.0,40\n0,1,3.5,50\n0,0,0.5,60\n";
        let data = load_csv_str(raw, &schema()).unwrap();
        assert_eq!(data.n(), 4);
        assert_eq!(data.width(), 2);
        let cs = data.summarize();
        assert_eq!((cs.n_11, cs.n_10, cs.n_01, cs.n_00), (1, 1, 1, 1));
        assert_relative_eq!(cs.p1_hat, 0.5);
        assert_relative_eq!(cs.p0_hat, 0.5);
    }

    #[test]
    fn rejects_non_binary_z_with_row_context() {
        let mut raw = String::from("z,s,y,age\n");
        for i in 0..6 {
            raw.push_str(&format!("{},1,1.0,{}\n", i % 2, 20 + i));
        }
        raw.push_str("2,0,1.0,70\n");
        let err = load_csv_str(&raw, &schema()).unwrap_err();
        match err {
            DataError::NonBinary { row, column, value } => {
                assert_eq!(row, 7);
                assert_eq!(column, "z");
                assert_eq!(value, "2");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_covariate_columns_naming_both() {
        let raw = "z,s,y,a,b\n1,1,1.0,2,2\n1,0,2.0,3,3\n0,1,0.5,4,4\n0,0,1.5,5,5\n";
        let err = load_csv_str(raw, &schema()).unwrap_err();
        match err {
            DataError::RankDeficient { column, on } => {
                assert_eq!(column, "b");
                assert!(on.contains('a'), "dependence set was [{on}]");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_reported() {
        let raw = "z,s,age\n1,1,30\n0,0,40\n";
        let err = load_csv_str(raw, &schema()).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(c) if c == "y"));
    }

    #[test]
    fn empty_arm_is_reported() {
        let raw = "z,s,y,age\n1,1,1.0,30\n1,0,2.0,40\n";
        let err = load_csv_str(raw, &schema()).unwrap_err();
        assert!(matches!(err, DataError::EmptyArm(0)));
    }

    #[test]
    fn all_treated_have_s_gives_p1_one() {
        let raw = "z,s,y,age\n1,1,1.0,30\n1,1,2.0,40\n0,0,1.0,50\n";
        let data = load_csv_str(raw, &schema()).unwrap();
        assert_relative_eq!(data.summarize().p1_hat, 1.0);
    }

    #[test]
    fn counted_shares_match_hand_counts() {
        let mut raw = String::from("z,s,y,age\n");
        for i in 0..50 {
            raw.push_str(&format!("1,{},1.0,{}\n", u8::from(i < 30), i));
        }
        for i in 0..50 {
            raw.push_str(&format!("0,{},1.0,{}\n", u8::from(i < 10), i));
        }
        let data = load_csv_str(&raw, &schema()).unwrap();
        let cs = data.summarize();
        assert_relative_eq!(cs.p1_hat, 0.6);
        assert_relative_eq!(cs.p0_hat, 0.2);
    }

    #[test]
    fn roundtrip_preserves_dataset() {
        let raw = "z,s,y,a\n1,1,2.25,0.125\n1,0,-1.5,3.75\n0,1,0.1,2.2\n0,0,7.0,-0.3\n";
        let data = load_csv_str(raw, &schema()).unwrap();
        let rewritten = data.to_csv_string();
        let reloaded = load_csv_str(&rewritten, &data.csv_schema()).unwrap();
        assert_eq!(data, reloaded);
    }

    #[test]
    fn summary_is_row_order_invariant() {
        let raw = "z,s,y,a\n1,1,2.0,1\n1,0,1.0,2\n0,1,3.0,3\n0,0,4.0,4\n";
        let flipped = "z,s,y,a\n0,0,4.0,4\n0,1,3.0,3\n1,0,1.0,2\n1,1,2.0,1\n";
        let a = load_csv_str(raw, &schema()).unwrap().summarize();
        let b = load_csv_str(flipped, &schema()).unwrap().summarize();
        assert_eq!(a, b);
    }

    #[test]
    fn score_only_schema_loads_without_outcome() {
        let raw = "z,s,a\n1,1,1\n1,0,2\n0,1,3\n0,0,4\n";
        let mut sch = schema();
        sch.y = None;
        let data = load_csv_str(raw, &sch).unwrap();
        assert!(data.y().is_none());
    }

    #[test]
    fn select_covariates_keeps_intercept() {
        let raw = "z,s,y,a,b\n1,1,1.0,2,9\n1,0,2.0,3,8\n0,1,0.5,4,7\n0,0,1.5,5,1\n";
        let data = load_csv_str(raw, &schema()).unwrap();
        let reduced = data.select_covariates(&["a"]).unwrap();
        assert_eq!(reduced.width(), 2);
        assert_eq!(reduced.covariate_names()[1], "a");
    }
}
