//! On-disk formats: binary grid files and the small CSV tables.
//!
//! A grid file is
//!
//! ```text
//! SACONV-GRID\n
//! <header length in bytes>\n
//! <TOML header>
//! <n_dates * n_lat * n_lon little-endian f32 values, date-major, row-major>
//! ```

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::DailyGridSeries;
use crate::{Error, Result};

const GRID_MAGIC: &str = "SACONV-GRID";
pub const GRID_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GridHeader {
    format_version: u32,
    variable: String,
    n_dates: usize,
    n_lat: usize,
    n_lon: usize,
    lats: Vec<f64>,
    lons: Vec<f64>,
    dates: Vec<NaiveDate>,
}

/// Splits `<magic>\n<len>\n<header><payload>` into header text and payload.
pub(crate) fn split_framed<'b>(bytes: &'b [u8], magic: &str, path: &Path) -> Result<(&'b str, &'b [u8])> {
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let mut rest = bytes
        .strip_prefix(magic.as_bytes())
        .and_then(|r| r.strip_prefix(b"\n"))
        .ok_or_else(|| bad(&format!("missing `{magic}` signature")))?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header length"))?;
    let len: usize = std::str::from_utf8(&rest[..nl])
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad("unreadable header length"))?;
    rest = &rest[nl + 1..];
    if rest.len() < len {
        return Err(bad("truncated header"));
    }
    let header = std::str::from_utf8(&rest[..len]).map_err(|_| bad("header is not UTF-8"))?;
    Ok((header, &rest[len..]))
}

pub(crate) fn frame(magic: &str, header: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{}\n{header}", header.len()).into_bytes();
    out.extend_from_slice(payload);
    out
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_grid(path: &Path, series: &DailyGridSeries) -> Result<()> {
    let header = GridHeader {
        format_version: GRID_FORMAT_VERSION,
        variable: series.variable.clone(),
        n_dates: series.len(),
        n_lat: series.lats().len(),
        n_lon: series.lons().len(),
        lats: series.lats().to_vec(),
        lons: series.lons().to_vec(),
        dates: series.dates().to_vec(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    let payload: Vec<u8> = series
        .values()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    write_atomic(path, &frame(GRID_MAGIC, &text, &payload))
}

pub fn read_grid(path: &Path) -> Result<DailyGridSeries> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (text, payload) = split_framed(&bytes, GRID_MAGIC, path)?;
    let header: GridHeader =
        toml::from_str(text).map_err(|e| Error::Format(format!("{}: bad grid header: {e}", path.display())))?;
    if header.format_version != GRID_FORMAT_VERSION {
        return Err(Error::Version(format!(
            "{}: grid format {} (expected {GRID_FORMAT_VERSION})",
            path.display(),
            header.format_version
        )));
    }
    if header.lats.len() != header.n_lat || header.lons.len() != header.n_lon || header.dates.len() != header.n_dates {
        return Err(Error::Format(format!(
            "{}: header dimensions disagree with its coordinate lists",
            path.display()
        )));
    }
    let expected = header.n_dates * header.n_lat * header.n_lon * 4;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, header implies {expected}",
            path.display(),
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    DailyGridSeries::new(header.variable, header.dates, header.lats, header.lons, values)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        csv::ErrorKind::Deserialize { err, .. } => Error::Parse {
            path: path.display().to_string(),
            line,
            msg: err.to_string(),
        },
        other => Error::Parse {
            path: path.display().to_string(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, required: &[&str]) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    for col in required {
        if !headers.iter().any(|h| h == *col) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: format!("missing column `{col}`"),
            });
        }
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

#[derive(Serialize, Deserialize)]
struct PrecipRow {
    date: NaiveDate,
    value: f64,
}

/// `date,value` series, dates strictly increasing.
pub fn read_precip_csv(path: &Path) -> Result<(Vec<NaiveDate>, Vec<f64>)> {
    let rows: Vec<PrecipRow> = read_csv(path, &["date", "value"])?;
    let dates: Vec<NaiveDate> = rows.iter().map(|r| r.date).collect();
    if let Some(i) = dates.windows(2).position(|w| w[0] >= w[1]) {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: i + 3,
            msg: format!("date {} does not follow {}", dates[i + 1], dates[i]),
        });
    }
    Ok((dates, rows.into_iter().map(|r| r.value).collect()))
}

pub fn write_precip_csv(path: &Path, dates: &[NaiveDate], values: &[f64]) -> Result<()> {
    let rows: Vec<PrecipRow> = dates
        .iter()
        .zip(values)
        .map(|(&date, &value)| PrecipRow { date, value })
        .collect();
    write_csv(path, &rows)
}

/// One row of a labels table; `threshold` holds the precipitation value the
/// label was derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub date: NaiveDate,
    pub label: u8,
    pub threshold_percentile: f64,
    #[serde(default)]
    pub threshold: Option<f64>,
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<LabelRow>> {
    let rows: Vec<LabelRow> = read_csv(path, &["date", "label", "threshold_percentile"])?;
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.label > 1) {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: i + 2,
            msg: format!("label {} is not 0 or 1", r.label),
        });
    }
    Ok(rows)
}

pub fn write_labels_csv(path: &Path, rows: &[LabelRow]) -> Result<()> {
    write_csv(path, rows)
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    date: NaiveDate,
    label: u8,
}

pub fn read_truth_csv(path: &Path) -> Result<(Vec<NaiveDate>, Vec<u8>)> {
    let rows: Vec<TruthRow> = read_csv(path, &["date", "label"])?;
    Ok(rows.into_iter().map(|r| (r.date, r.label)).unzip())
}

pub fn write_truth_csv(path: &Path, dates: &[NaiveDate], labels: &[u8]) -> Result<()> {
    let rows: Vec<TruthRow> = dates
        .iter()
        .zip(labels)
        .map(|(&date, &label)| TruthRow { date, label })
        .collect();
    write_csv(path, &rows)
}
