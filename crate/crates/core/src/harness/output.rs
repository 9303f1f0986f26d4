use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::metrics::{MetricsReport, METRIC_COLUMNS};

/// Writes `metrics.csv`-style tables: leading key columns, then the metric columns.
pub fn write_metrics<W: Write>(w: W, keys: &[&str], rows: &[(Vec<String>, &MetricsReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(keys.iter().copied().chain(METRIC_COLUMNS))?;
    for (k, report) in rows {
        out.write_record(k.iter().cloned().chain(report.csv_fields()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_metrics_file(path: &Path, keys: &[&str], rows: &[(Vec<String>, &MetricsReport)]) -> Result<()> {
    write_metrics(BufWriter::new(File::create(path)?), keys, rows)
}

/// One JSON object per line.
pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: impl IntoIterator<Item = T>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl_file<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    write_jsonl(BufWriter::new(File::create(path)?), items)
}

/// Plain CSV with an arbitrary header.
pub fn write_table_file(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    out.write_record(header)?;
    for r in rows {
        out.write_record(r)?;
    }
    out.flush()?;
    Ok(())
}
