//! Column-oriented tabular data with an explicit missingness mask.
//!
//! Every cell keeps its original CSV token; imputation only ever rewrites
//! cells that were missing on ingestion, so observed cells round-trip
//! bitwise. A parsed numeric view sits alongside the raw strings for
//! modelling. Missing cells are the empty string or the literal `NA`.

use crate::error::Error;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// Recorded two-level coding of a binary column: `zero`/`one` are the raw
/// tokens mapped to 0 and 1 in the numeric view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCoding {
    pub zero: String,
    pub one: String,
}

#[derive(Debug, Clone)]
pub struct TabularDataset {
    names: Vec<String>,
    /// Column-major raw tokens, exactly as ingested (or as written by fill).
    raw: Vec<Vec<String>>,
    /// Parsed view: None for non-numeric columns.
    numeric: Vec<Option<Vec<Option<f64>>>>,
    /// Missingness at ingestion; fills never change this.
    original_missing: Vec<Vec<bool>>,
    codings: Vec<Option<BinaryCoding>>,
    cluster_col: usize,
    n_rows: usize,
}

fn is_missing_token(tok: &str) -> bool {
    tok.is_empty() || tok == "NA"
}

impl TabularDataset {
    pub fn from_csv_path(path: &Path, cluster_column: &str) -> Result<Self, Error> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        Self::from_csv_reader(file, cluster_column)
    }

    pub fn from_csv_reader<R: Read>(reader: R, cluster_column: &str) -> Result<Self, Error> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Data(format!("bad CSV header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut raw: Vec<Vec<String>> = vec![Vec::new(); names.len()];
        for record in rdr.records() {
            let record = record.map_err(|e| Error::Data(format!("bad CSV record: {e}")))?;
            if record.len() != names.len() {
                return Err(Error::Data(format!(
                    "row has {} fields, header has {}",
                    record.len(),
                    names.len()
                )));
            }
            for (c, field) in record.iter().enumerate() {
                raw[c].push(field.to_string());
            }
        }
        Self::from_raw_columns(names, raw, cluster_column)
    }

    pub fn from_raw_columns(
        names: Vec<String>,
        raw: Vec<Vec<String>>,
        cluster_column: &str,
    ) -> Result<Self, Error> {
        if names.len() != raw.len() {
            return Err(Error::Data("names/columns length mismatch".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(Error::Data(format!("duplicate column name {n}")));
            }
        }
        let cluster_col = names
            .iter()
            .position(|n| n == cluster_column)
            .ok_or_else(|| Error::Data(format!("cluster column {cluster_column} not found")))?;
        let n_rows = raw.first().map_or(0, Vec::len);
        if n_rows == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if raw.iter().any(|c| c.len() != n_rows) {
            return Err(Error::Data("ragged columns".into()));
        }
        if raw[cluster_col].iter().any(|t| is_missing_token(t)) {
            return Err(Error::Data("cluster column has missing values".into()));
        }

        let mut numeric = Vec::with_capacity(names.len());
        let mut original_missing = Vec::with_capacity(names.len());
        for col in &raw {
            let mut vals = Vec::with_capacity(n_rows);
            let mut mask = Vec::with_capacity(n_rows);
            let mut parse_ok = true;
            for tok in col {
                if is_missing_token(tok) {
                    vals.push(None);
                    mask.push(true);
                } else {
                    mask.push(false);
                    match tok.trim().parse::<f64>() {
                        Ok(v) if v.is_finite() => vals.push(Some(v)),
                        _ => {
                            parse_ok = false;
                            vals.push(None);
                        }
                    }
                }
            }
            numeric.push(parse_ok.then_some(vals));
            original_missing.push(mask);
        }

        let codings = vec![None; names.len()];
        Ok(Self {
            names,
            raw,
            numeric,
            original_missing,
            codings,
            cluster_col,
            n_rows,
        })
    }

    /// Build from already-numeric columns (the simulation generator path).
    /// `columns` pairs each non-cluster name with its values.
    pub fn from_numeric_columns(
        cluster_name: &str,
        cluster_labels: Vec<String>,
        columns: Vec<(String, Vec<Option<f64>>)>,
    ) -> Result<Self, Error> {
        let n_rows = cluster_labels.len();
        let mut names = vec![cluster_name.to_string()];
        let mut raw = vec![cluster_labels];
        for (name, vals) in columns {
            if vals.len() != n_rows {
                return Err(Error::Data(format!("column {name} has wrong length")));
            }
            names.push(name);
            raw.push(
                vals.iter()
                    .map(|v| v.map_or_else(String::new, |x| format_value(x)))
                    .collect(),
            );
        }
        Self::from_raw_columns(names, raw, cluster_name)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cluster_column_name(&self) -> &str {
        &self.names[self.cluster_col]
    }

    pub fn column_index(&self, name: &str) -> Result<usize, Error> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Data(format!("column {name} not found")))
    }

    pub fn cluster_labels(&self) -> &[String] {
        &self.raw[self.cluster_col]
    }

    /// Clusters in order of first appearance with their row indices.
    pub fn cluster_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
        for (row, label) in self.raw[self.cluster_col].iter().enumerate() {
            if !map.contains_key(label.as_str()) {
                order.push(label.clone());
            }
            map.entry(label.as_str()).or_default().push(row);
        }
        order
            .into_iter()
            .map(|label| {
                let rows = map.remove(label.as_str()).unwrap_or_default();
                (label, rows)
            })
            .collect()
    }

    /// Numeric view of a column; errors for non-numeric columns.
    pub fn numeric_column(&self, name: &str) -> Result<&[Option<f64>], Error> {
        let idx = self.column_index(name)?;
        self.numeric[idx]
            .as_deref()
            .ok_or_else(|| Error::Data(format!("column {name} is not numeric")))
    }

    /// Current working value of a numeric cell, if the column is numeric and
    /// the cell holds a value.
    pub fn numeric_at(&self, col: usize, row: usize) -> Option<f64> {
        self.numeric[col].as_ref().and_then(|vals| vals[row])
    }

    /// True when the cell was missing at ingestion, regardless of fills.
    pub fn originally_missing(&self, col: usize, row: usize) -> bool {
        self.original_missing[col][row]
    }

    pub fn n_originally_missing(&self, name: &str) -> Result<usize, Error> {
        let idx = self.column_index(name)?;
        Ok(self.original_missing[idx].iter().filter(|&&b| b).count())
    }

    pub fn coding(&self, name: &str) -> Result<Option<&BinaryCoding>, Error> {
        Ok(self.codings[self.column_index(name)?].as_ref())
    }

    /// Normalize a two-level column to {0,1} in the numeric view, recording
    /// the token mapping (sorted token order). Columns already coded 0/1 get
    /// an identity coding.
    pub fn normalize_binary_column(&mut self, name: &str) -> Result<BinaryCoding, Error> {
        let idx = self.column_index(name)?;
        if let Some(existing) = &self.codings[idx] {
            return Ok(existing.clone());
        }
        let mut levels: Vec<&str> = Vec::new();
        for (row, tok) in self.raw[idx].iter().enumerate() {
            if self.original_missing[idx][row] {
                continue;
            }
            if !levels.contains(&tok.as_str()) {
                levels.push(tok);
            }
        }
        if levels.is_empty() || levels.len() > 2 {
            return Err(Error::Data(format!(
                "column {name} has {} observed levels, need 1 or 2",
                levels.len()
            )));
        }
        levels.sort_unstable();
        let coding = if levels.len() == 1 {
            // degenerate but tolerated; the single level maps by its value
            let only = levels[0].to_string();
            if only.trim().parse::<f64>().map(|v| v == 0.0).unwrap_or(false) {
                BinaryCoding { zero: only, one: "1".into() }
            } else {
                BinaryCoding { zero: "0".into(), one: only }
            }
        } else {
            BinaryCoding {
                zero: levels[0].to_string(),
                one: levels[1].to_string(),
            }
        };
        let mut vals = Vec::with_capacity(self.n_rows);
        for (row, tok) in self.raw[idx].iter().enumerate() {
            if self.original_missing[idx][row] {
                vals.push(None);
            } else if tok == &coding.zero {
                vals.push(Some(0.0));
            } else {
                vals.push(Some(1.0));
            }
        }
        self.numeric[idx] = Some(vals);
        self.codings[idx] = Some(coding.clone());
        Ok(coding)
    }

    /// Overwrite one cell's working value. Only cells that were missing at
    /// ingestion may be set; the raw token is formatted through the column's
    /// binary coding when one is registered.
    pub fn set_value(&mut self, col: usize, row: usize, value: f64) -> Result<(), Error> {
        if !self.original_missing[col][row] {
            return Err(Error::Data(format!(
                "refusing to overwrite observed cell ({col},{row})"
            )));
        }
        let token = match &self.codings[col] {
            Some(coding) => {
                if value == 0.0 {
                    coding.zero.clone()
                } else {
                    coding.one.clone()
                }
            }
            None => format_value(value),
        };
        self.raw[col][row] = token;
        if let Some(vals) = self.numeric[col].as_mut() {
            vals[row] = Some(value);
        }
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<(), Error> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
        self.write_csv(file)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names)
            .map_err(|e| Error::Data(format!("csv write: {e}")))?;
        for row in 0..self.n_rows {
            let rec: Vec<&str> = self.raw.iter().map(|c| c[row].as_str()).collect();
            w.write_record(&rec)
                .map_err(|e| Error::Data(format!("csv write: {e}")))?;
        }
        w.flush().map_err(|e| Error::Data(format!("csv flush: {e}")))?;
        Ok(())
    }

    pub fn raw_cell(&self, col: usize, row: usize) -> &str {
        &self.raw[col][row]
    }
}

/// Canonical shortest round-trip formatting for filled cells.
pub fn format_value(v: f64) -> String {
    let mut buf = ryu_format(v);
    // trim trailing ".0" for integral values to keep files compact
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_csv() -> &'static str {
        "cluster,x,y,label\nA,1.5,2.0,u\nA,2.5,NA,v\nB,3.25,,w\nB,0.125,7.5,x\n"
    }

    #[test]
    fn parses_missing_tokens_and_groups_clusters() {
        let d = TabularDataset::from_csv_reader(sample_csv().as_bytes(), "cluster").unwrap();
        assert_eq!(d.n_rows(), 4);
        let y = d.numeric_column("y").unwrap();
        assert_eq!(y[0], Some(2.0));
        assert_eq!(y[1], None);
        assert_eq!(y[2], None);
        assert_eq!(d.n_originally_missing("y").unwrap(), 2);
        let groups = d.cluster_groups();
        assert_eq!(groups[0].0, "A");
        assert_eq!(groups[0].1, vec![0, 1]);
        assert_eq!(groups[1].1, vec![2, 3]);
        assert!(d.numeric_column("label").is_err());
    }

    #[test]
    fn observed_cells_round_trip_bitwise() {
        let mut d = TabularDataset::from_csv_reader(sample_csv().as_bytes(), "cluster").unwrap();
        let y_idx = d.column_index("y").unwrap();
        d.set_value(y_idx, 1, 3.14159).unwrap();
        d.set_value(y_idx, 2, -0.5).unwrap();
        let mut out = Vec::new();
        d.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        // observed tokens preserved exactly, including "3.25" and "7.5"
        assert!(text.contains("A,1.5,2,u") || text.contains("A,1.5,2.0,u"));
        assert!(text.contains("B,3.25,-0.5,w"));
        assert!(text.contains("B,0.125,7.5,x"));
        assert!(text.contains("3.14159"));
        // refuses to overwrite observed cells
        assert!(d.set_value(y_idx, 0, 1.0).is_err());
    }

    #[test]
    fn binary_normalization_maps_two_levels() {
        let csv = "cluster,t\nA,yes\nA,no\nB,\nB,yes\n";
        let mut d = TabularDataset::from_csv_reader(csv.as_bytes(), "cluster").unwrap();
        let coding = d.normalize_binary_column("t").unwrap();
        assert_eq!(coding.zero, "no");
        assert_eq!(coding.one, "yes");
        let t = d.numeric_column("t").unwrap();
        assert_eq!(t[0], Some(1.0));
        assert_eq!(t[1], Some(0.0));
        assert_eq!(t[2], None);
        let idx = d.column_index("t").unwrap();
        d.set_value(idx, 2, 1.0).unwrap();
        assert_eq!(d.raw_cell(idx, 2), "yes");
    }

    #[test]
    fn zero_one_columns_get_identity_coding() {
        let csv = "cluster,t\nA,0\nA,1\nB,1\nB,\n";
        let mut d = TabularDataset::from_csv_reader(csv.as_bytes(), "cluster").unwrap();
        let coding = d.normalize_binary_column("t").unwrap();
        assert_eq!(coding.zero, "0");
        assert_eq!(coding.one, "1");
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(TabularDataset::from_csv_reader("a,b\n1,2\n".as_bytes(), "missing").is_err());
        assert!(TabularDataset::from_csv_reader("a,a\n1,2\n".as_bytes(), "a").is_err());
        // missing cluster label
        assert!(TabularDataset::from_csv_reader("a,b\n,2\n".as_bytes(), "a").is_err());
        // empty file
        assert!(TabularDataset::from_csv_reader("a,b\n".as_bytes(), "a").is_err());
    }

    #[test]
    fn numeric_constructor_formats_canonically() {
        let d = TabularDataset::from_numeric_columns(
            "cluster",
            vec!["c1".into(), "c1".into()],
            vec![
                ("x".into(), vec![Some(1.0), Some(0.5)]),
                ("y".into(), vec![None, Some(-2.25)]),
            ],
        )
        .unwrap();
        assert_eq!(d.raw_cell(1, 0), "1");
        assert_eq!(d.raw_cell(2, 0), "");
        assert_eq!(d.numeric_column("y").unwrap()[1], Some(-2.25));
        assert!(d.originally_missing(2, 0));
    }
}
