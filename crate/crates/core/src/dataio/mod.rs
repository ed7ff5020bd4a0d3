//! Tabular dataset loading, min-max scaling and cross-validation folds.

mod folds;
mod scale;

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Matrix;

pub use folds::{make_folds, FoldPlan};
pub use scale::{minmax_scale, ScaleParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numerical,
    Categorical,
}

/// Column roles for a CSV file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
}

impl Schema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        Ok(serde_json::from_reader(file)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub class_names: Vec<String>,
    pub column_kinds: Vec<ColumnKind>,
    pub column_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        let (n, d) = features.shape();
        if n == 0 || d == 0 {
            return Err(Error::config(format!("dataset must be non-empty, got {n}x{d}")));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::config(format!("{} labels for {n} rows", l.len())));
            }
        }
        let classes = labels
            .as_ref()
            .map_or(0, |l| l.iter().copied().max().map_or(0, |m| m + 1));
        Ok(Self {
            features,
            labels,
            class_names: (0..classes).map(|c| c.to_string()).collect(),
            column_kinds: vec![ColumnKind::Numerical; d],
            column_names: (0..d).map(|j| format!("x{j}")).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn count_kind(&self, kind: ColumnKind) -> usize {
        self.column_kinds.iter().filter(|&&k| k == kind).count()
    }
}

/// Loads a CSV whose first line is a header. Categorical cells and labels are
/// mapped to integers in order of first appearance.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();

    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::config(format!("{}: no column named `{name}`", path.display())))
    };
    let label_col = schema.label.as_deref().map(find).transpose()?;
    let mut kinds = vec![ColumnKind::Numerical; header.len()];
    for name in &schema.categorical {
        kinds[find(name)?] = ColumnKind::Categorical;
    }
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&c| Some(c) != label_col).collect();

    let mut levels: Vec<HashMap<String, usize>> = vec![HashMap::new(); header.len()];
    let mut class_names: Vec<String> = Vec::new();
    let mut class_index: HashMap<String, usize> = HashMap::new();
    let mut values = Vec::new();
    let mut labels = Vec::new();

    for (r, record) in reader.records().enumerate() {
        // header is line 1
        let line = r + 2;
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::Load {
                path: path.to_owned(),
                row: line,
                column: record.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        if let Some(lc) = label_col {
            let cell = &record[lc];
            let next = class_names.len();
            let idx = *class_index.entry(cell.to_owned()).or_insert_with(|| {
                class_names.push(cell.to_owned());
                next
            });
            labels.push(idx);
        }
        for &c in &feature_cols {
            let cell = &record[c];
            let v = match kinds[c] {
                ColumnKind::Categorical => {
                    let next = levels[c].len();
                    *levels[c].entry(cell.to_owned()).or_insert(next) as f64
                }
                ColumnKind::Numerical => match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => {
                        return Err(Error::Load {
                            path: path.to_owned(),
                            row: line,
                            column: c + 1,
                            message: format!("cannot parse `{cell}` as a finite number"),
                        })
                    }
                },
            };
            values.push(v);
        }
    }

    let n = values.len() / feature_cols.len().max(1);
    let features = Matrix::from_vec(n, feature_cols.len(), values)?;
    let mut ds = Dataset::new(features, label_col.map(|_| labels))?;
    ds.class_names = class_names;
    ds.column_kinds = feature_cols.iter().map(|&c| kinds[c]).collect();
    ds.column_names = feature_cols.iter().map(|&c| header[c].clone()).collect();
    Ok(ds)
}

/// Loads a CSV together with its JSON schema file.
pub fn load_dataset(csv_path: impl AsRef<Path>, schema_path: impl AsRef<Path>) -> Result<Dataset> {
    let schema = Schema::from_json_file(schema_path)?;
    load_csv(csv_path, &schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn single_cell_file() {
        let f = write_tmp("x\n0.5\n");
        let ds = load_csv(f.path(), &Schema::default()).unwrap();
        assert_eq!(ds.features.shape(), (1, 1));
        assert_eq!(ds.features.get(0, 0), 0.5);
        assert!(ds.labels.is_none());
    }

    #[test]
    fn categorical_levels_in_first_appearance_order() {
        let f = write_tmp("sex,len,class\nM,0.4,a\nF,0.3,b\nI,0.2,a\nF,0.1,c\n");
        let schema = Schema {
            label: Some("class".into()),
            categorical: vec!["sex".into()],
        };
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.d(), 2);
        let sex: Vec<f64> = (0..4).map(|i| ds.features.get(i, 0)).collect();
        assert_eq!(sex, vec![0.0, 1.0, 2.0, 1.0]);
        assert_eq!(ds.labels.as_deref(), Some(&[0, 1, 0, 2][..]));
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.count_kind(ColumnKind::Categorical), 1);
    }

    #[test]
    fn bad_cell_reports_location() {
        let f = write_tmp("a,b\n1,2\n3,oops\n");
        match load_csv(f.path(), &Schema::default()) {
            Err(Error::Load { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_row_is_rejected() {
        let f = write_tmp("a,b\n1,2\n3\n");
        assert!(matches!(load_csv(f.path(), &Schema::default()), Err(Error::Load { row: 3, .. })));
    }

    #[test]
    fn unknown_schema_column() {
        let f = write_tmp("a,b\n1,2\n");
        let schema = Schema {
            label: Some("nope".into()),
            categorical: vec![],
        };
        assert!(matches!(load_csv(f.path(), &schema), Err(Error::Config(_))));
    }

    #[test]
    fn empty_file_is_rejected() {
        let f = write_tmp("a,b\n");
        assert!(load_csv(f.path(), &Schema::default()).is_err());
    }
}
