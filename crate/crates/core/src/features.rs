//! CSV persistence for feature tables and detector scores.
//!
//! Floats are written with 17 significant digits so that parsing and
//! re-serializing a file reproduces it byte for byte.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::gradfeat::FeatureTable;
use crate::metrics::ScoredSample;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

type Result<T> = std::result::Result<T, CsvError>;

/// Lossless text form of an `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CsvError + '_ {
    move |source| CsvError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> CsvError {
    CsvError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn features_to_writer<W: Write>(table: &FeatureTable, out: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample_id".to_string(), "anomaly_label".into(), "source_tag".into()];
    header.extend((0..table.dim()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (i, row) in table.values.iter().enumerate() {
        let mut rec = vec![i.to_string(), table.anomaly_label.to_string(), table.source_tag.clone()];
        rec.extend(row.iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_features(path: &Path, table: &FeatureTable) -> Result<()> {
    let file = File::create(path).map_err(|source| CsvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    features_to_writer(table, file).map_err(csv_err(path))
}

/// Parses a feature CSV. Rows must be numbered `0..n` and share one source
/// tag and anomaly label. A header-only file yields an empty table.
pub fn features_from_reader<R: Read>(input: R, path: &Path) -> Result<FeatureTable> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.len() < 3 || &header[0] != "sample_id" || &header[1] != "anomaly_label" || &header[2] != "source_tag" {
        return Err(format_err(path, "expected header sample_id,anomaly_label,source_tag,f0,..."));
    }
    for (j, name) in header.iter().skip(3).enumerate() {
        if name != format!("f{j}") {
            return Err(format_err(path, format!("feature column {j} is named `{name}`")));
        }
    }
    let dim = header.len() - 3;
    let mut table = FeatureTable::new(String::new(), -1, Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = i + 2;
        let id: usize = rec[0]
            .parse()
            .map_err(|_| format_err(path, format!("line {line}: bad sample_id `{}`", &rec[0])))?;
        if id != i {
            return Err(format_err(path, format!("line {line}: sample_id {id}, expected {i}")));
        }
        let label: i8 = match &rec[1] {
            "0" => 0,
            "1" => 1,
            "-1" => -1,
            other => return Err(format_err(path, format!("line {line}: bad anomaly_label `{other}`"))),
        };
        if i == 0 {
            table.anomaly_label = label;
            table.source_tag = rec[2].to_string();
        } else if label != table.anomaly_label || rec[2] != table.source_tag {
            return Err(format_err(path, format!("line {line}: mixed source tags or labels")));
        }
        let row = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|_| format_err(path, format!("line {line}: bad float `{v}`"))))
            .collect::<Result<Vec<f64>>>()?;
        debug_assert_eq!(row.len(), dim);
        table.values.push(row);
    }
    Ok(table)
}

pub fn read_features(path: &Path) -> Result<FeatureTable> {
    let file = File::open(path).map_err(|source| CsvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    features_from_reader(file, path)
}

pub fn write_scores(path: &Path, scored: &[ScoredSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["sample_id", "anomaly_label", "score", "source_tag"])
        .map_err(csv_err(path))?;
    for s in scored {
        w.write_record([
            s.sample_id.to_string(),
            s.anomaly_label.to_string(),
            fmt_f64(s.score),
            s.source_tag.clone(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| CsvError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredSample>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let bad = || format_err(path, format!("line {}: malformed score row", i + 2));
        if rec.len() != 4 {
            return Err(bad());
        }
        out.push(ScoredSample {
            sample_id: rec[0].parse().map_err(|_| bad())?,
            anomaly_label: rec[1].parse().map_err(|_| bad())?,
            score: rec[2].parse().map_err(|_| bad())?,
            source_tag: rec[3].to_string(),
        });
    }
    Ok(out)
}
