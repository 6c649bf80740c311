use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricsError, Scores};

pub const COLUMNS: [&str; 8] = [
    "dev_dice",
    "dev_f1",
    "dev_recall",
    "dev_precision",
    "test_dice",
    "test_f1",
    "test_recall",
    "test_precision",
];

const STAT_ROWS: [&str; 4] = ["mean", "std", "max", "min"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub fold_name: String,
    pub dev_dice: f64,
    pub dev_f1: f64,
    pub dev_recall: f64,
    pub dev_precision: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_dice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_precision: Option<f64>,
}

impl MetricsRecord {
    pub fn from_scores(fold_name: impl Into<String>, dev: &Scores, test: Option<&Scores>) -> Self {
        MetricsRecord {
            fold_name: fold_name.into(),
            dev_dice: dev.dice,
            dev_f1: dev.f1,
            dev_recall: dev.recall,
            dev_precision: dev.precision,
            test_dice: test.map(|s| s.dice),
            test_f1: test.map(|s| s.f1),
            test_recall: test.map(|s| s.recall),
            test_precision: test.map(|s| s.precision),
        }
    }

    /// Values in [`COLUMNS`] order.
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            Some(self.dev_dice),
            Some(self.dev_f1),
            Some(self.dev_recall),
            Some(self.dev_precision),
            self.test_dice,
            self.test_f1,
            self.test_recall,
            self.test_precision,
        ]
    }

    fn from_values(fold_name: String, v: [Option<f64>; 8]) -> Option<Self> {
        Some(MetricsRecord {
            fold_name,
            dev_dice: v[0]?,
            dev_f1: v[1]?,
            dev_recall: v[2]?,
            dev_precision: v[3]?,
            test_dice: v[4],
            test_f1: v[5],
            test_recall: v[6],
            test_precision: v[7],
        })
    }

    fn presence(&self) -> [bool; 8] {
        self.values().map(|v| v.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    /// Population standard deviation (divides by n).
    pub std: f64,
    pub max: f64,
    pub min: f64,
}

impl ColumnStats {
    fn get(&self, row: &str) -> f64 {
        match row {
            "mean" => self.mean,
            "std" => self.std,
            "max" => self.max,
            _ => self.min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateStats {
    pub columns: BTreeMap<String, ColumnStats>,
}

impl AggregateStats {
    pub fn get(&self, column: &str) -> Option<&ColumnStats> {
        self.columns.get(column)
    }
}

fn column_stats(values: &[f64]) -> ColumnStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    ColumnStats {
        mean,
        std: var.sqrt(),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

pub fn aggregate_records(records: &[MetricsRecord]) -> Result<AggregateStats, MetricsError> {
    let first = records.first().ok_or(MetricsError::EmptyInput)?;
    let presence = first.presence();
    for r in records {
        if r.presence() != presence {
            return Err(MetricsError::RaggedColumns {
                fold_name: r.fold_name.clone(),
            });
        }
        for (col, v) in COLUMNS.iter().zip(r.values()) {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(MetricsError::OutOfRange {
                        fold_name: r.fold_name.clone(),
                        column: col.to_string(),
                        value: v,
                    });
                }
            }
        }
    }
    // sort values per column so the sums do not depend on record order
    let mut columns = BTreeMap::new();
    for (k, col) in COLUMNS.iter().enumerate() {
        if !presence[k] {
            continue;
        }
        let mut values: Vec<f64> = records.iter().filter_map(|r| r.values()[k]).collect();
        values.sort_by(f64::total_cmp);
        columns.insert(col.to_string(), column_stats(&values));
    }
    Ok(AggregateStats { columns })
}

/// A parsed metrics table: per-run records plus the summary rows when
/// present.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub records: Vec<MetricsRecord>,
    pub stats: Option<AggregateStats>,
}

fn present_columns(records: &[MetricsRecord]) -> Vec<usize> {
    let presence = records.first().map(|r| r.presence()).unwrap_or([true, true, true, true, false, false, false, false]);
    (0..8).filter(|&k| presence[k]).collect()
}

/// Writes records in fold-name order followed by mean/std/max/min rows;
/// test columns are omitted when the records have none.
pub fn emit_table(records: &[MetricsRecord], stats: &AggregateStats, path: &Path) -> Result<(), MetricsError> {
    let cols = present_columns(records);
    let mut sorted: Vec<&MetricsRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.fold_name.cmp(&b.fold_name));

    let mut wtr = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| MetricsError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    };
    let header: Vec<&str> = std::iter::once("fold_name").chain(cols.iter().map(|&k| COLUMNS[k])).collect();
    wtr.write_record(&header).map_err(io)?;
    for r in sorted {
        let v = r.values();
        let row: Vec<String> = std::iter::once(r.fold_name.clone())
            .chain(cols.iter().map(|&k| format!("{:.4}", v[k].unwrap_or(f64::NAN))))
            .collect();
        wtr.write_record(&row).map_err(io)?;
    }
    for stat in STAT_ROWS {
        let mut row = vec![stat.to_string()];
        for &k in &cols {
            let s = stats.get(COLUMNS[k]).ok_or(MetricsError::RaggedColumns {
                fold_name: stat.to_string(),
            })?;
            row.push(format!("{:.4}", s.get(stat)));
        }
        wtr.write_record(&row).map_err(io)?;
    }
    let bytes = wtr.into_inner().map_err(|e| io(e.into_error().into()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| MetricsError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_table(path: &Path) -> Result<Table, MetricsError> {
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_table(&text)
}

pub fn parse_table(text: &str) -> Result<Table, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let parse_err = |line: usize, reason: String| MetricsError::Parse { line, reason };
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.get(0) != Some("fold_name") {
        return Err(parse_err(1, "first column must be fold_name".into()));
    }
    let mut index = Vec::new();
    for h in header.iter().skip(1) {
        let k = COLUMNS.iter().position(|c| *c == h).ok_or_else(|| parse_err(1, format!("unknown column {h:?}")))?;
        index.push(k);
    }
    let mut records = Vec::new();
    let mut stat_rows: BTreeMap<String, [Option<f64>; 8]> = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        let name = row.get(0).unwrap_or_default().to_string();
        let mut values = [None; 8];
        for (cell, &k) in row.iter().skip(1).zip(&index) {
            if cell.is_empty() {
                continue;
            }
            values[k] = Some(cell.parse::<f64>().map_err(|e| parse_err(line, format!("{cell:?}: {e}")))?);
        }
        if STAT_ROWS.contains(&name.as_str()) {
            stat_rows.insert(name, values);
        } else {
            let rec = MetricsRecord::from_values(name, values).ok_or_else(|| parse_err(line, "missing dev_* value".into()))?;
            records.push(rec);
        }
    }
    let stats = if stat_rows.len() == STAT_ROWS.len() {
        let mut columns = BTreeMap::new();
        for &k in &index {
            let get = |row: &str| stat_rows[row][k].ok_or_else(|| parse_err(0, format!("summary row {row} lacks {}", COLUMNS[k])));
            columns.insert(
                COLUMNS[k].to_string(),
                ColumnStats {
                    mean: get("mean")?,
                    std: get("std")?,
                    max: get("max")?,
                    min: get("min")?,
                },
            );
        }
        Some(AggregateStats { columns })
    } else {
        None
    };
    Ok(Table { records, stats })
}
