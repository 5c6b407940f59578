//! CSV tables with a label column, and prediction CSVs.
//!
//! Rows whose label cell is empty are test rows. Non-numeric feature
//! columns are ordinal-encoded by first appearance among train rows; values
//! unseen there map to -1. Empty and `NA`/`NaN`/`?` cells are missing (NaN).

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::column::csv_io;
use crate::error::{Error, Result};
use crate::icl::ClassProbabilities;
use crate::tensor::Tensor;

pub const UNSEEN_CATEGORY: f32 = -1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "na" | "NaN" | "nan" | "?" | "null")
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a headed CSV; ragged rows are reported with their line and field.
pub fn read_csv<R: Read>(r: R) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(r);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            column: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Parse {
            row: 1,
            column: 1,
            message: "missing header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row: e.position().map(|p| p.line() as usize).unwrap_or(line),
            column: 1,
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                row: line,
                column: record.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        rows.push(record.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            row: 2,
            column: 1,
            message: "no data rows".into(),
        });
    }
    Ok(RawTable { header, rows })
}

/// Encoded table, train rows first.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTable {
    pub features: Vec<String>,
    pub categorical: Vec<bool>,
    /// `(n_train + n_test) x m`, missing cells NaN.
    pub x: Tensor<f32>,
    pub y_train: Vec<usize>,
    /// Known test labels (evaluation) or `None` (prediction).
    pub y_test: Vec<Option<usize>>,
    /// Original 0-based data-row index of every train row, then every test row.
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub class_names: Vec<String>,
}

impl PreparedTable {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_train(&self) -> usize {
        self.train_rows.len()
    }
}

fn class_order(names: &mut [String]) {
    if names.iter().all(|n| parse_number(n).is_some()) {
        names.sort_by(|a, b| parse_number(a).partial_cmp(&parse_number(b)).expect("finite"));
    } else {
        names.sort();
    }
}

/// Splits by label presence, or by `test_rows` when given (all labels known).
pub fn prepare_table(raw: &RawTable, target: &str, test_rows: Option<&[usize]>) -> Result<PreparedTable> {
    let t = raw
        .header
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| Error::Input(format!("target column `{target}` not in header {:?}", raw.header)))?;
    let n = raw.rows.len();
    let (train_rows, test_rows): (Vec<usize>, Vec<usize>) = match test_rows {
        None => (0..n).partition(|&i| !raw.rows[i][t].trim().is_empty()),
        Some(test) => {
            let mut is_test = vec![false; n];
            for &i in test {
                *is_test.get_mut(i).ok_or_else(|| Error::Input(format!("test row {i} out of range")))? = true;
            }
            (0..n).partition(|&i| !is_test[i])
        }
    };
    if let Some(&i) = train_rows.iter().find(|&&i| raw.rows[i][t].trim().is_empty()) {
        return Err(Error::Parse {
            row: i + 2,
            column: t + 1,
            message: "train row without a label".into(),
        });
    }
    if train_rows.is_empty() {
        return Err(Error::Input("no labelled train rows".into()));
    }
    let mut class_names: Vec<String> = train_rows.iter().map(|&i| raw.rows[i][t].trim().to_string()).collect();
    class_names.sort();
    class_names.dedup();
    class_order(&mut class_names);
    if class_names.len() < 2 {
        return Err(Error::Degenerate(format!(
            "label column `{target}` has a single class among train rows"
        )));
    }
    let class_of: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let y_train: Vec<usize> = train_rows.iter().map(|&i| class_of[raw.rows[i][t].trim()]).collect();
    let y_test: Vec<Option<usize>> = test_rows
        .iter()
        .map(|&i| class_of.get(raw.rows[i][t].trim()).copied())
        .collect();
    let feature_cols: Vec<usize> = (0..raw.header.len()).filter(|&j| j != t).collect();
    if feature_cols.is_empty() {
        return Err(Error::Input("no feature columns".into()));
    }
    let order: Vec<usize> = train_rows.iter().chain(&test_rows).copied().collect();
    let m = feature_cols.len();
    let mut data = vec![f32::NAN; order.len() * m];
    let mut categorical = vec![false; m];
    for (jj, &j) in feature_cols.iter().enumerate() {
        let cells = |i: usize| raw.rows[i][j].trim();
        categorical[jj] = (0..n).any(|i| !is_missing(cells(i)) && parse_number(cells(i)).is_none());
        if categorical[jj] {
            let mut codes: HashMap<&str, usize> = HashMap::new();
            for &i in &train_rows {
                let c = cells(i);
                if !is_missing(c) {
                    let next = codes.len();
                    codes.entry(c).or_insert(next);
                }
            }
            for (r, &i) in order.iter().enumerate() {
                let c = cells(i);
                if !is_missing(c) {
                    data[r * m + jj] = codes.get(c).map(|&k| k as f32).unwrap_or(UNSEEN_CATEGORY);
                }
            }
        } else {
            for (r, &i) in order.iter().enumerate() {
                if let Some(v) = parse_number(cells(i)) {
                    data[r * m + jj] = v as f32;
                }
            }
        }
    }
    Ok(PreparedTable {
        features: feature_cols.iter().map(|&j| raw.header[j].clone()).collect(),
        categorical,
        x: Tensor::new(vec![order.len(), m], data)?,
        y_train,
        y_test,
        train_rows,
        test_rows,
        class_names,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub row_id: usize,
    pub pred_label: String,
    pub probabilities: Vec<f64>,
}

/// `row_id,pred_label,p_0,..,p_{C-1}` with probabilities to 6 decimals.
pub fn write_predictions<W: Write>(
    w: W,
    row_ids: &[usize],
    probs: &ClassProbabilities,
    class_names: &[String],
) -> Result<()> {
    if row_ids.len() != probs.rows || class_names.len() != probs.classes {
        return Err(Error::Input(format!(
            "{} row ids and {} class names for {}x{} probabilities",
            row_ids.len(),
            class_names.len(),
            probs.rows,
            probs.classes
        )));
    }
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["row_id".to_string(), "pred_label".to_string()];
    header.extend((0..probs.classes).map(|c| format!("p_{c}")));
    out.write_record(&header).map_err(csv_io)?;
    for ((&id, row), label) in row_ids.iter().zip(probs.iter_rows()).zip(probs.argmax()) {
        let mut rec = vec![id.to_string(), class_names[label].clone()];
        rec.extend(row.iter().map(|p| format!("{p:.6}")));
        out.write_record(&rec).map_err(csv_io)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions<R: Read>(r: R) -> Result<Vec<PredictionRow>> {
    let raw = read_csv(r)?;
    if raw.header.len() < 3 || raw.header[0] != "row_id" || raw.header[1] != "pred_label" {
        return Err(Error::Parse {
            row: 1,
            column: 1,
            message: "expected row_id,pred_label,p_0,...".into(),
        });
    }
    raw.rows
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let bad = |column: usize, message: String| Error::Parse { row: i + 2, column, message };
            let row_id = rec[0].parse().map_err(|e| bad(1, format!("{e}")))?;
            let probabilities = rec[2..]
                .iter()
                .enumerate()
                .map(|(j, v)| v.parse::<f64>().map_err(|e| bad(j + 3, format!("{e}"))))
                .collect::<Result<_>>()?;
            Ok(PredictionRow {
                row_id,
                pred_label: rec[1].clone(),
                probabilities,
            })
        })
        .collect()
}
