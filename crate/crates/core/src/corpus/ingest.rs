use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::NaiveDate;
use serde::Deserialize;

use super::{Frequency, NumericalSeries, TextEvent};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Which columns of a numerical CSV to read.
#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub frequency: Frequency,
    /// Target channel by header name; defaults to the first numeric column.
    pub target: Option<String>,
    /// Numeric columns to keep, in order; defaults to all of them.
    pub channels: Option<Vec<String>>,
}

impl ColumnSpec {
    pub fn new(frequency: Frequency) -> Self {
        ColumnSpec {
            frequency,
            target: None,
            channels: None,
        }
    }
}

/// Parses `YYYY-MM-DD` or `YYYY-MM`; anything after a `T` or space in a
/// full date is ignored.
pub fn parse_date(raw: &str) -> Option<NaiveDate> {
    let s = raw.trim();
    let day_part = s.split(['T', ' ']).next().unwrap_or(s);
    NaiveDate::parse_from_str(day_part, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(&format!("{day_part}-01"), "%Y-%m-%d"))
        .ok()
}

/// Reads a CSV whose first column is a date and whose remaining columns are
/// numeric. Rows must already be in strictly increasing period order with
/// no missing periods.
pub fn load_numerical(path: impl AsRef<Path>, spec: &ColumnSpec) -> Result<NumericalSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingest {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Ingest {
            row: 0,
            message: "need a date column and at least one numeric column".into(),
        });
    }
    let numeric: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let wanted: Vec<String> = spec.channels.clone().unwrap_or_else(|| numeric.clone());
    let mut columns = Vec::with_capacity(wanted.len());
    for name in &wanted {
        let idx = numeric
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column {name:?} not in header")))?;
        columns.push(idx + 1);
    }
    let target = match &spec.target {
        Some(name) => wanted
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("target column {name:?} not among channels")))?,
        None => 0,
    };

    let mut timestamps: Vec<NaiveDate> = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let record = record.map_err(|e| Error::Ingest {
            row,
            message: e.to_string(),
        })?;
        let raw_date = record.get(0).unwrap_or("");
        let date = parse_date(raw_date).ok_or_else(|| Error::Ingest {
            row,
            message: format!("unparseable date {raw_date:?}"),
        })?;
        let date = spec.frequency.truncate(date);
        if let Some(&prev) = timestamps.last() {
            if date <= prev {
                return Err(Error::Ordering {
                    row,
                    date: date.to_string(),
                    previous: prev.to_string(),
                });
            }
            let expected = spec.frequency.next(prev);
            if date != expected {
                return Err(Error::Gap {
                    row,
                    expected: expected.to_string(),
                    found: date.to_string(),
                });
            }
        }
        for &c in &columns {
            let cell = record.get(c).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::Ingest {
                row,
                message: format!("column {:?}: {cell:?} is not a number", &headers[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest {
                    row,
                    message: format!("column {:?}: non-finite value", &headers[c]),
                });
            }
            values.push(v);
        }
        timestamps.push(date);
    }
    let n = timestamps.len();
    Ok(NumericalSeries {
        timestamps,
        values: Tensor::new([n, wanted.len()], values)?,
        channel_names: wanted,
        target,
        frequency: spec.frequency,
    })
}

#[derive(Deserialize)]
struct TextLine {
    date: String,
    text: String,
}

/// Reads JSON Lines with `date` and `text` fields, truncates dates to the
/// period start and merges texts that fall in the same period.
pub fn load_text_events(path: impl AsRef<Path>, frequency: Frequency) -> Result<Vec<TextEvent>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TextLine = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            row: i + 1,
            message: e.to_string(),
        })?;
        let date = parse_date(&parsed.date).ok_or_else(|| Error::Ingest {
            row: i + 1,
            message: format!("unparseable date {:?}", parsed.date),
        })?;
        raw.push(TextEvent {
            date,
            text: parsed.text,
        });
    }
    Ok(merge_same_period(raw, frequency))
}

/// Orders events by their original timestamp, then joins the texts of each
/// period with a single space. Empty texts contribute nothing.
pub fn merge_same_period(mut events: Vec<TextEvent>, frequency: Frequency) -> Vec<TextEvent> {
    events.sort_by_key(|e| e.date);
    let mut merged: Vec<TextEvent> = Vec::new();
    for e in events {
        let date = frequency.truncate(e.date);
        match merged.last_mut() {
            Some(last) if last.date == date => {
                if !e.text.is_empty() {
                    if !last.text.is_empty() {
                        last.text.push(' ');
                    }
                    last.text.push_str(&e.text);
                }
            }
            _ => merged.push(TextEvent { date, text: e.text }),
        }
    }
    merged
}
