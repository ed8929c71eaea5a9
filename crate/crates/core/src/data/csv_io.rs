use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{DomainDataset, DomainTag};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Column layout of a dataset CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    #[serde(default)]
    pub label_column: Option<String>,
    /// Class count; inferred as `max label + 1` (at least 2) when absent.
    #[serde(default)]
    pub classes: Option<usize>,
    pub domain: DomainTag,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<DomainDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_csv(file, schema, &path.display().to_string())
}

/// Parses CSV text from any reader. `provenance` names the source.
pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema, provenance: &str) -> Result<DomainDataset> {
    if schema.feature_columns.is_empty() {
        return Err(Error::Schema("schema declares no feature columns".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv { line: 1, message: e.to_string() })?
        .clone();
    let feat_idx = schema
        .feature_columns
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let label_idx = schema.label_column.as_deref().map(|c| column(&headers, c)).transpose()?;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != headers.len() {
            return Err(Error::Csv {
                line,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        for &j in &feat_idx {
            let v: f64 = rec[j].trim().parse().map_err(|_| Error::Csv {
                line,
                message: format!("`{}` is not a number", &rec[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv { line, message: "non-finite feature".into() });
            }
            values.push(v);
        }
        if let Some(j) = label_idx {
            let y: usize = rec[j].trim().parse().map_err(|_| Error::Csv {
                line,
                message: format!("`{}` is not a class index", &rec[j]),
            })?;
            if let Some(k) = schema.classes {
                if y >= k {
                    return Err(Error::Csv {
                        line,
                        message: format!("label {y} out of range for {k} classes"),
                    });
                }
            }
            labels.push(y);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Csv { line: 1, message: "no data rows".into() });
    }
    let classes = schema
        .classes
        .unwrap_or_else(|| labels.iter().max().map(|m| m + 1).unwrap_or(2).max(2));
    let features = Tensor::matrix(rows, feat_idx.len(), values)?;
    let labels = label_idx.map(|_| labels);
    DomainDataset::new(features, labels, classes, schema.domain, provenance)
}

/// Writes features as `x0..x{d-1}` plus a `label` column when present.
pub fn write_csv(ds: &DomainDataset, path: impl AsRef<Path>) -> Result<CsvSchema> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv { line: 0, message: e.to_string() })?;
    let feature_columns: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    let mut header = feature_columns.clone();
    if ds.has_labels() {
        header.push("label".into());
    }
    let csv_err = |e: csv::Error| Error::Csv { line: 0, message: e.to_string() };
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features().row(i).iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = ds.eval_labels() {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(CsvSchema {
        feature_columns,
        label_column: ds.has_labels().then(|| "label".into()),
        classes: Some(ds.classes()),
        domain: ds.domain(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(label: bool) -> CsvSchema {
        CsvSchema {
            feature_columns: vec!["a".into(), "b".into()],
            label_column: label.then(|| "y".into()),
            classes: Some(3),
            domain: DomainTag::Source,
        }
    }

    #[test]
    fn hand_written_file() {
        let text = "a,b,y\n1.5,-2,0\n0,0.25,2\n3,4,1\n";
        let ds = read_csv(text.as_bytes(), &schema(true), "inline").unwrap();
        assert_eq!(ds.features().shape(), &[3, 2]);
        assert_eq!(ds.features().data(), &[1.5, -2.0, 0.0, 0.25, 3.0, 4.0]);
        assert_eq!(ds.eval_labels().unwrap(), &[0, 2, 1]);
        assert_eq!(ds.provenance(), "inline");
    }

    #[test]
    fn column_order_follows_schema() {
        let text = "y,b,a\n1,2,3\n";
        let ds = read_csv(text.as_bytes(), &schema(true), "x").unwrap();
        assert_eq!(ds.features().data(), &[3.0, 2.0]);
    }

    #[test]
    fn unlabeled_schema_ignores_label_column() {
        let text = "a,b,y\n1,2,0\n";
        let ds = read_csv(text.as_bytes(), &schema(false), "x").unwrap();
        assert!(!ds.has_labels());
    }

    #[test]
    fn missing_label_column() {
        let text = "a,b\n1,2\n";
        assert!(matches!(read_csv(text.as_bytes(), &schema(true), "x"), Err(Error::Schema(_))));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "a,b,y\n1,2,0\n1,oops,0\n";
        match read_csv(text.as_bytes(), &schema(true), "x") {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let ragged = "a,b,y\n1,2,0\n1,2\n";
        match read_csv(ragged.as_bytes(), &schema(true), "x") {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range() {
        let text = "a,b,y\n1,2,0\n1,2,5\n";
        match read_csv(text.as_bytes(), &schema(true), "x") {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let ds = DomainDataset::new(
            Tensor::from_rows(&[vec![0.1, 1.0 / 3.0], vec![-7.25, 1e-17]]).unwrap(),
            Some(vec![1, 0]),
            2,
            DomainTag::Target,
            "mem",
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let schema = write_csv(&ds, &path).unwrap();
        let back = load_csv(&path, &schema).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.eval_labels(), ds.eval_labels());
        assert_eq!(back.domain(), DomainTag::Target);
    }
}
