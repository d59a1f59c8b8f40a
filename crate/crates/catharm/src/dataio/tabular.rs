//! Schema-driven CSV ingestion. A schema file is line-oriented
//! `column,kind,role` triples (`#` comments allowed):
//!
//! ```text
//! age,numeric,both
//! purpose,categorical,feature
//! credit_risk,categorical,label
//! ```
//!
//! kinds: numeric | categorical; roles: feature | label | covariate | both |
//! ignore. Categorical features expand to one-hot columns in first-appearance
//! order; rows with missing or unparseable cells are dropped and counted.

use std::collections::BTreeMap;
use std::path::Path;

use super::{DataError, DataKind, Dataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRole {
    Feature,
    Label,
    Covariate,
    Both,
    Ignore,
}

impl ColumnRole {
    fn is_feature(&self) -> bool {
        matches!(self, ColumnRole::Feature | ColumnRole::Both)
    }

    fn is_covariate(&self) -> bool {
        matches!(self, ColumnRole::Covariate | ColumnRole::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemaColumn {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
}

pub fn parse_schema(text: &str) -> Result<Vec<SchemaColumn>, DataError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(DataError::Schema {
                line: line_no,
                message: format!("expected `column,kind,role`, got '{line}'"),
            });
        }
        let kind = match parts[1] {
            "numeric" => ColumnKind::Numeric,
            "categorical" => ColumnKind::Categorical,
            other => {
                return Err(DataError::Schema {
                    line: line_no,
                    message: format!("unknown kind '{other}'"),
                })
            }
        };
        let role = match parts[2] {
            "feature" => ColumnRole::Feature,
            "label" => ColumnRole::Label,
            "covariate" => ColumnRole::Covariate,
            "both" => ColumnRole::Both,
            "ignore" => ColumnRole::Ignore,
            other => {
                return Err(DataError::Schema {
                    line: line_no,
                    message: format!("unknown role '{other}'"),
                })
            }
        };
        out.push(SchemaColumn {
            name: parts[0].to_string(),
            kind,
            role,
        });
    }
    let labels = out.iter().filter(|c| c.role == ColumnRole::Label).count();
    if labels != 1 {
        return Err(DataError::Schema {
            line: 0,
            message: format!("schema must declare exactly one label column, found {labels}"),
        });
    }
    Ok(out)
}

/// Loads a CSV against a schema file. Features keep their raw scale here;
/// the training pipeline standardizes numeric columns with train-split
/// statistics.
pub fn load_tabular_csv(path: &Path, schema_path: &Path) -> Result<Dataset, DataError> {
    let schema_text = std::fs::read_to_string(schema_path).map_err(|source| DataError::Io {
        path: schema_path.display().to_string(),
        source,
    })?;
    let schema = parse_schema(&schema_text)?;
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| DataError::Invalid(format!("csv header: {e}")))?
        .clone();
    let mut col_index = Vec::with_capacity(schema.len());
    for col in &schema {
        let idx = headers
            .iter()
            .position(|h| h.trim() == col.name)
            .ok_or_else(|| DataError::MissingColumn(col.name.clone()))?;
        col_index.push(idx);
    }

    // pass 1: collect cells, dropping rows with missing/bad values
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Invalid(format!("csv record: {e}")))?;
        let mut cells = Vec::with_capacity(schema.len());
        let mut ok = true;
        for (col, &idx) in schema.iter().zip(col_index.iter()) {
            let cell = record.get(idx).unwrap_or("").trim();
            if col.role == ColumnRole::Ignore {
                cells.push(String::new());
                continue;
            }
            if cell.is_empty() || cell == "?" || cell == "NA" {
                ok = false;
                break;
            }
            if col.kind == ColumnKind::Numeric && cell.parse::<f64>().is_err() {
                ok = false;
                break;
            }
            cells.push(cell.to_string());
        }
        if ok {
            rows.push(cells);
        } else {
            dropped += 1;
        }
    }

    // pass 2: encode
    let m = rows.len();
    let mut feature_cols: Vec<Vec<f64>> = Vec::new();
    let mut numeric_mask: Vec<bool> = Vec::new();
    let mut raw_columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut labels: Vec<usize> = Vec::new();

    for (ci, col) in schema.iter().enumerate() {
        match (col.kind, col.role) {
            (_, ColumnRole::Ignore) => {}
            (ColumnKind::Numeric, role) => {
                let values: Vec<f64> = rows
                    .iter()
                    .map(|r| r[ci].parse::<f64>().expect("validated in pass 1"))
                    .collect();
                if role == ColumnRole::Label {
                    labels = values.iter().map(|&v| v as usize).collect();
                    continue;
                }
                if role.is_covariate() {
                    raw_columns.insert(col.name.clone(), values.clone());
                }
                if role.is_feature() {
                    feature_cols.push(values);
                    numeric_mask.push(true);
                }
            }
            (ColumnKind::Categorical, role) => {
                let mut categories: Vec<String> = Vec::new();
                let mut codes: Vec<usize> = Vec::with_capacity(m);
                for r in &rows {
                    let v = &r[ci];
                    let code = match categories.iter().position(|c| c == v) {
                        Some(p) => p,
                        None => {
                            categories.push(v.clone());
                            categories.len() - 1
                        }
                    };
                    codes.push(code);
                }
                if role == ColumnRole::Label {
                    labels = codes.clone();
                    continue;
                }
                if role.is_covariate() {
                    raw_columns
                        .insert(col.name.clone(), codes.iter().map(|&c| c as f64).collect());
                }
                if role.is_feature() {
                    for k in 0..categories.len() {
                        feature_cols
                            .push(codes.iter().map(|&c| f64::from(c == k)).collect());
                        numeric_mask.push(false);
                    }
                }
            }
        }
    }

    let p = feature_cols.len();
    let mut data = vec![0.0; m * p];
    for (c, colv) in feature_cols.iter().enumerate() {
        for (r, &v) in colv.iter().enumerate() {
            data[r * p + c] = v;
        }
    }
    let features = Tensor::from_raw(vec![m, p], data);
    let mut ds = Dataset::from_parts(DataKind::Tabular, features, labels, raw_columns, numeric_mask);
    ds.dropped_rows = dropped;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        p
    }

    const SCHEMA: &str = "\
# toy schema
age,numeric,both
color,categorical,feature
site,categorical,covariate
outcome,categorical,label
";

    const CSV: &str = "\
age,color,site,outcome,extra
31,red,a,good,x
44,blue,b,bad,y
27,red,a,good,z
";

    #[test]
    fn loads_toy_csv_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "toy.csv", CSV);
        let schema = write(dir.path(), "toy.schema", SCHEMA);
        let a = load_tabular_csv(&csv, &schema).unwrap();
        let b = load_tabular_csv(&csv, &schema).unwrap();
        assert_eq!(a, b);
        // features: age + one-hot(color: red, blue) = 3 columns
        assert_eq!(a.feature_dim(), 3);
        assert_eq!(a.labels, vec![0, 1, 0]);
        assert_eq!(a.raw_columns["site"], vec![0.0, 1.0, 0.0]);
        assert_eq!(a.numeric_columns, vec![true, false, false]);
        // one-hot first-appearance order: red first
        assert_eq!(a.features.get(0, 1), 1.0);
        assert_eq!(a.features.get(1, 2), 1.0);
    }

    #[test]
    fn bad_rows_are_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(
            dir.path(),
            "toy.csv",
            "age,color,site,outcome\n31,red,a,good\nnot_a_number,blue,b,bad\n,red,a,good\n27,red,a,bad\n",
        );
        let schema = write(dir.path(), "toy.schema", SCHEMA);
        let ds = load_tabular_csv(&csv, &schema).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dropped_rows, 2);
    }

    #[test]
    fn missing_column_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "toy.csv", "age,color,outcome\n31,red,good\n");
        let schema = write(dir.path(), "toy.schema", SCHEMA);
        assert!(matches!(
            load_tabular_csv(&csv, &schema),
            Err(DataError::MissingColumn(_))
        ));
    }

    #[test]
    fn schema_rejects_bad_kind_and_missing_label() {
        assert!(matches!(
            parse_schema("age,float,feature\ny,categorical,label\n"),
            Err(DataError::Schema { line: 1, .. })
        ));
        assert!(matches!(
            parse_schema("age,numeric,feature\n"),
            Err(DataError::Schema { .. })
        ));
    }
}
