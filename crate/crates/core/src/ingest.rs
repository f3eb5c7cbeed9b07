//! Recorded datasets and their paced replay.
//!
//! A dataset file (CSV or a JSON array of `{t, values}` records) is loaded
//! into a [`RecordedStream`]: rows sorted by timestamp, NA tokens turned into
//! [`SampleValue::Missing`], duplicate timestamps rejected. Replay is pull
//! based: [`replay_next`] tells the caller which sample is next and the wall
//! clock instant at which it becomes due.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{validate_descriptor, Sample, SampleValue, SignalDescriptor, Timestamp};

pub const DEFAULT_NA_TOKENS: [&str; 3] = ["NA", "NaN", ""];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line_no}, column {column}: {reason}")]
    Parse {
        line_no: usize,
        column: String,
        reason: String,
    },
    #[error("duplicate timestamp {t}")]
    DuplicateTimestamp { t: Timestamp },
    #[error("stream is empty")]
    EmptyStream,
    #[error("invalid mapping: {0}")]
    Mapping(String),
}

impl IngestError {
    fn parse(line_no: usize, column: impl Into<String>, reason: impl Into<String>) -> Self {
        IngestError::Parse {
            line_no,
            column: column.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable name, used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            IngestError::Io { .. } => "io_error",
            IngestError::Parse { .. } => "parse_error",
            IngestError::DuplicateTimestamp { .. } => "duplicate_timestamp",
            IngestError::EmptyStream => "empty_stream",
            IngestError::Mapping(_) => "mapping_error",
        }
    }
}

/// How columns of a CSV file map onto a signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvMapping {
    pub timestamp_column: String,
    pub value_columns: Vec<String>,
    #[serde(default = "default_na_tokens")]
    pub na_tokens: Vec<String>,
}

pub fn default_na_tokens() -> Vec<String> {
    DEFAULT_NA_TOKENS.iter().map(|s| s.to_string()).collect()
}

/// A fully loaded stream: strictly increasing timestamps and one row of
/// `descriptor.channels` values per timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedStream {
    pub descriptor: SignalDescriptor,
    pub timestamps: Vec<Timestamp>,
    pub rows: Vec<Vec<SampleValue>>,
}

/// Side information gathered while loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadReport {
    /// The file was not already sorted by timestamp.
    pub reordered: bool,
}

impl RecordedStream {
    /// Sorts `(t, row)` pairs and checks the stream invariants.
    pub fn from_rows(
        descriptor: SignalDescriptor,
        rows: Vec<(Timestamp, Vec<SampleValue>)>,
    ) -> Result<(Self, LoadReport), IngestError> {
        validate_descriptor(&descriptor)
            .map_err(|e| IngestError::Mapping(format!("descriptor {}: {}", e.field, e.reason)))?;
        let reordered = rows.windows(2).any(|w| w[1].0 < w[0].0);
        let mut rows = rows;
        rows.sort_by_key(|(t, _)| *t);
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(IngestError::DuplicateTimestamp { t: w[0].0 });
        }
        let channels = descriptor.channels as usize;
        if let Some((t, row)) = rows.iter().find(|(_, r)| r.len() != channels) {
            return Err(IngestError::Mapping(format!(
                "row at t={t} has {} values, descriptor declares {channels} channels",
                row.len()
            )));
        }
        if rows.is_empty() {
            tracing::warn!(device = %descriptor.device_id, signal = %descriptor.signal, "dataset has no data rows");
        }
        let (timestamps, rows) = rows.into_iter().unzip();
        Ok((
            RecordedStream {
                descriptor,
                timestamps,
                rows,
            },
            LoadReport { reordered },
        ))
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample::new(
            self.descriptor.device_id.clone(),
            self.descriptor.signal.clone(),
            self.timestamps[i],
            self.rows[i].clone(),
        )
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample> + '_ {
        (0..self.len()).map(|i| self.sample(i))
    }

    pub fn missing_count(&self) -> usize {
        self.rows
            .iter()
            .flatten()
            .filter(|v| v.is_missing())
            .count()
    }

    /// Last minus first timestamp, in ms.
    pub fn span_ms(&self) -> u64 {
        match (self.timestamps.first(), self.timestamps.last()) {
            (Some(a), Some(b)) => b.0 - a.0,
            _ => 0,
        }
    }

    /// Mean sampling rate implied by the timestamps.
    pub fn estimated_rate_hz(&self) -> Option<f64> {
        let span = self.span_ms();
        if self.len() < 2 || span == 0 {
            return None;
        }
        Some((self.len() - 1) as f64 * 1000.0 / span as f64)
    }
}

/// Parses a timestamp cell: integer epoch milliseconds or ISO-8601 in UTC.
/// ISO values without an offset are taken as UTC; sub-millisecond digits are
/// truncated.
pub fn parse_timestamp(raw: &str) -> Result<Timestamp, String> {
    let raw = raw.trim();
    if let Ok(ms) = raw.parse::<i64>() {
        return if ms < 0 {
            Err("negative timestamp".to_string())
        } else {
            Ok(Timestamp(ms as u64))
        };
    }
    let ms = if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        dt.timestamp_millis()
    } else if let Ok(dt) = NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S%.f") {
        dt.and_utc().timestamp_millis()
    } else if let Ok(dt) = NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S%.f") {
        dt.and_utc().timestamp_millis()
    } else {
        return Err(format!("{raw:?} is neither integer ms nor ISO-8601"));
    };
    if ms < 0 {
        Err("timestamp before 1970-01-01".to_string())
    } else {
        Ok(Timestamp(ms as u64))
    }
}

fn parse_cell(raw: &str, na_tokens: &[String]) -> Result<SampleValue, String> {
    let trimmed = raw.trim();
    if na_tokens.iter().any(|na| na == raw || na == trimmed) {
        return Ok(SampleValue::Missing);
    }
    let v: f64 = trimmed
        .parse()
        .map_err(|_| format!("{raw:?} is not a number"))?;
    if !v.is_finite() {
        return Err(format!("{raw:?} is not finite"));
    }
    Ok(SampleValue::Number(v))
}

pub fn load_csv(
    path: impl AsRef<Path>,
    mapping: &CsvMapping,
    descriptor: SignalDescriptor,
) -> Result<RecordedStream, IngestError> {
    load_csv_with_report(path, mapping, descriptor).map(|(s, _)| s)
}

pub fn load_csv_with_report(
    path: impl AsRef<Path>,
    mapping: &CsvMapping,
    descriptor: SignalDescriptor,
) -> Result<(RecordedStream, LoadReport), IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, mapping, descriptor)
}

/// CSV loader over any reader (RFC 4180 quoting, header row required).
pub fn read_csv(
    reader: impl Read,
    mapping: &CsvMapping,
    descriptor: SignalDescriptor,
) -> Result<(RecordedStream, LoadReport), IngestError> {
    if mapping.value_columns.len() != descriptor.channels as usize {
        return Err(IngestError::Mapping(format!(
            "{} value columns mapped but descriptor declares {} channels",
            mapping.value_columns.len(),
            descriptor.channels
        )));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::Headers)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::parse(1, "", e.to_string()))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::parse(1, name, "column not found in header"))
    };
    let t_idx = find(&mapping.timestamp_column)?;
    let value_idx = mapping
        .value_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            IngestError::parse(line, "", e.to_string())
        })?;
        let line_no = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let cell = |idx: usize, name: &str| {
            record
                .get(idx)
                .ok_or_else(|| IngestError::parse(line_no, name, "missing field"))
        };
        let t = parse_timestamp(cell(t_idx, &mapping.timestamp_column)?)
            .map_err(|reason| IngestError::parse(line_no, &mapping.timestamp_column, reason))?;
        let values = value_idx
            .iter()
            .zip(&mapping.value_columns)
            .map(|(&idx, name)| {
                parse_cell(cell(idx, name)?, &mapping.na_tokens)
                    .map_err(|reason| IngestError::parse(line_no, name, reason))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((t, values));
    }
    RecordedStream::from_rows(descriptor, rows)
}

pub fn load_json(
    path: impl AsRef<Path>,
    descriptor: SignalDescriptor,
) -> Result<RecordedStream, IngestError> {
    load_json_with_report(path, descriptor).map(|(s, _)| s)
}

pub fn load_json_with_report(
    path: impl AsRef<Path>,
    descriptor: SignalDescriptor,
) -> Result<(RecordedStream, LoadReport), IngestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_json_dataset(&text, descriptor)
}

/// JSON dataset: a top-level array of `{"t": ms | iso, "values": [...]}`.
/// `line_no` in errors is the 1-based record index.
pub fn parse_json_dataset(
    text: &str,
    descriptor: SignalDescriptor,
) -> Result<(RecordedStream, LoadReport), IngestError> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| IngestError::parse(e.line(), "", e.to_string()))?;
    let Value::Array(records) = root else {
        return Err(IngestError::parse(1, "", "root must be a JSON array"));
    };
    let mut rows = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        let record_no = i + 1;
        let t = match record.get("t") {
            Some(Value::Number(n)) => match n.as_u64() {
                Some(ms) => Timestamp(ms),
                None if n.as_i64().is_some_and(|v| v < 0) => {
                    return Err(IngestError::parse(record_no, "t", "negative timestamp"))
                }
                None => return Err(IngestError::parse(record_no, "t", "timestamp must be an integer")),
            },
            Some(Value::String(s)) => {
                parse_timestamp(s).map_err(|reason| IngestError::parse(record_no, "t", reason))?
            }
            Some(_) => return Err(IngestError::parse(record_no, "t", "wrong type")),
            None => return Err(IngestError::parse(record_no, "t", "missing field")),
        };
        let values = record
            .get("values")
            .ok_or_else(|| IngestError::parse(record_no, "values", "missing field"))?;
        let values: Vec<SampleValue> = serde_json::from_value(values.clone())
            .map_err(|e| IngestError::parse(record_no, "values", e.to_string()))?;
        if values.len() != descriptor.channels as usize {
            return Err(IngestError::parse(
                record_no,
                "values",
                format!("expected {} values, got {}", descriptor.channels, values.len()),
            ));
        }
        rows.push((t, values));
    }
    RecordedStream::from_rows(descriptor, rows)
}

#[derive(Serialize)]
struct JsonRecord<'a> {
    t: Timestamp,
    values: &'a [SampleValue],
}

/// Serializes rows in the JSON dataset schema, one record per line.
pub fn to_json_dataset(timestamps: &[Timestamp], rows: &[Vec<SampleValue>]) -> Result<String, IngestError> {
    let mut out = String::from("[");
    for (i, (t, values)) in timestamps.iter().zip(rows).enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('\n');
        let record = serde_json::to_string(&JsonRecord { t: *t, values })
            .map_err(|e| IngestError::parse(i + 1, "values", e.to_string()))?;
        out.push_str(&record);
    }
    out.push_str("\n]\n");
    Ok(out)
}

/// Shifts the stream so it starts at `t_start`; intervals are preserved.
pub fn rebase_timestamps(s: &RecordedStream, t_start: Timestamp) -> Result<RecordedStream, IngestError> {
    let first = *s.timestamps.first().ok_or(IngestError::EmptyStream)?;
    Ok(RecordedStream {
        descriptor: s.descriptor.clone(),
        timestamps: s.timestamps.iter().map(|t| Timestamp(t.0 - first.0 + t_start.0)).collect(),
        rows: s.rows.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayPlan {
    pub streams: Vec<RecordedStream>,
    /// Playback speed; 1.0 is real time.
    pub speed: f64,
    /// Re-stamp samples so the first one carries the replay start time.
    pub rebase: bool,
    /// Start over when all streams are exhausted.
    pub looped: bool,
}

impl ReplayPlan {
    pub fn new(streams: Vec<RecordedStream>, speed: f64, rebase: bool, looped: bool) -> Result<Self, IngestError> {
        if !(speed.is_finite() && speed > 0.0) {
            return Err(IngestError::Mapping(format!("replay speed must be > 0, got {speed}")));
        }
        Ok(ReplayPlan {
            streams,
            speed,
            rebase,
            looped,
        })
    }

    fn first_t(&self) -> Option<Timestamp> {
        self.streams.iter().filter_map(|s| s.timestamps.first().copied()).min()
    }

    fn last_t(&self) -> Option<Timestamp> {
        self.streams.iter().filter_map(|s| s.timestamps.last().copied()).max()
    }

    /// Timeline length of one loop pass: the data span plus one nominal
    /// sampling period of the fastest stream, so wrapped timestamps stay
    /// strictly after the previous pass.
    fn lap_ms(&self) -> u64 {
        let span = match (self.first_t(), self.last_t()) {
            (Some(a), Some(b)) => b.0 - a.0,
            _ => 0,
        };
        let period = self
            .streams
            .iter()
            .map(|s| (1000.0 / s.descriptor.rate_hz).round() as u64)
            .min()
            .unwrap_or(1)
            .max(1);
        span + period
    }
}

/// Replay position; owned by a single scheduler.
#[derive(Debug, Clone, Default)]
pub struct ReplayCursor {
    positions: Vec<usize>,
    lap: u64,
    epoch: Option<Timestamp>,
}

impl ReplayCursor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Cursor whose replay clock starts at `epoch` instead of at the first
    /// `replay_next` call.
    pub fn starting_at(epoch: Timestamp) -> Self {
        ReplayCursor {
            epoch: Some(epoch),
            ..Self::default()
        }
    }

    pub fn epoch(&self) -> Option<Timestamp> {
        self.epoch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayStep {
    Due { due: Timestamp, sample: Sample },
    Exhausted,
}

/// Returns the earliest not-yet-emitted sample of the plan and the instant it
/// is due: `epoch + (t - first_t) / speed`. The replay epoch is fixed by the
/// first call (`now`) unless the cursor was created with one. Ties between
/// streams go to the stream listed first.
pub fn replay_next(plan: &ReplayPlan, cursor: &mut ReplayCursor, now: Timestamp) -> ReplayStep {
    let Some(first_t) = plan.first_t() else {
        return ReplayStep::Exhausted;
    };
    let epoch = *cursor.epoch.get_or_insert(now);
    if cursor.positions.len() != plan.streams.len() {
        cursor.positions = vec![0; plan.streams.len()];
    }

    let pick = |positions: &[usize]| {
        plan.streams
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.timestamps.get(positions[i]).map(|t| (*t, i)))
            .min()
    };
    let mut next = pick(&cursor.positions);
    if next.is_none() && plan.looped {
        cursor.lap += 1;
        cursor.positions.iter_mut().for_each(|p| *p = 0);
        next = pick(&cursor.positions);
    }
    let Some((t, idx)) = next else {
        return ReplayStep::Exhausted;
    };

    let stream = &plan.streams[idx];
    let mut sample = stream.sample(cursor.positions[idx]);
    cursor.positions[idx] += 1;

    let offset = t.0 - first_t.0 + cursor.lap * plan.lap_ms();
    let due = epoch.0 + (offset as f64 / plan.speed).round() as u64;
    sample.t = if plan.rebase {
        Timestamp(epoch.0 + offset)
    } else {
        Timestamp(first_t.0 + offset)
    };
    ReplayStep::Due {
        due: Timestamp(due),
        sample,
    }
}
