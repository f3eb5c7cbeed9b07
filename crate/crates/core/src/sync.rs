//! Timeline operations: ordered merge, epoch extraction and alignment of
//! multi-rate streams on a reference clock.
//!
//! Epoch bounds are inclusive on both ends. Alignment never interpolates: a
//! stream with no sample close enough to a reference instant simply has no
//! cell in that frame.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use thiserror::Error;

use crate::ingest::RecordedStream;
use crate::model::{Sample, SampleValue, SignalKey, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("input {device_id}/{signal} is not sorted at position {position}")]
    UnsortedInput {
        device_id: String,
        signal: String,
        position: usize,
    },
    #[error("unknown reference {0}")]
    UnknownReference(String),
    #[error("invalid epoch: t0 {t0} > t1 {t1}")]
    InvalidEpoch { t0: Timestamp, t1: Timestamp },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Epoch {
    pub t0: Timestamp,
    pub t1: Timestamp,
    pub label: String,
}

impl Epoch {
    pub fn new(t0: Timestamp, t1: Timestamp, label: impl Into<String>) -> Result<Self, SyncError> {
        if t0 > t1 {
            return Err(SyncError::InvalidEpoch { t0, t1 });
        }
        Ok(Epoch {
            t0,
            t1,
            label: label.into(),
        })
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.t0 <= t && t <= self.t1
    }
}

/// Merges individually sorted sequences into one non-decreasing sequence.
/// Equal timestamps are ordered by (device_id, signal), then by input index.
pub fn merge_ordered(streams: Vec<Vec<Sample>>) -> Result<Vec<Sample>, SyncError> {
    for stream in &streams {
        if let Some(pos) = stream.windows(2).position(|w| w[1].t < w[0].t) {
            let s = &stream[pos + 1];
            return Err(SyncError::UnsortedInput {
                device_id: s.device_id.clone(),
                signal: s.signal.clone(),
                position: pos + 1,
            });
        }
    }

    let total = streams.iter().map(Vec::len).sum();
    let mut iters: Vec<_> = streams.into_iter().map(|s| s.into_iter().peekable()).collect();
    let mut heap = BinaryHeap::new();
    let key = |s: &Sample, idx: usize| Reverse((s.t, s.device_id.clone(), s.signal.clone(), idx));
    for (idx, it) in iters.iter_mut().enumerate() {
        if let Some(s) = it.peek() {
            heap.push(key(s, idx));
        }
    }
    let mut out = Vec::with_capacity(total);
    while let Some(Reverse((_, _, _, idx))) = heap.pop() {
        let sample = iters[idx].next().expect("peeked sample");
        out.push(sample);
        if let Some(s) = iters[idx].peek() {
            heap.push(key(s, idx));
        }
    }
    Ok(out)
}

/// Samples with `t0 <= t <= t1`, in their original order.
pub fn extract_epoch(samples: &[Sample], e: &Epoch) -> Vec<Sample> {
    samples.iter().filter(|s| e.contains(s.t)).cloned().collect()
}

/// Epoch extraction on a recorded stream; the result keeps its descriptor.
pub fn extract_recorded_epoch(stream: &RecordedStream, e: &Epoch) -> RecordedStream {
    let lo = stream.timestamps.partition_point(|t| *t < e.t0);
    let hi = stream.timestamps.partition_point(|t| *t <= e.t1);
    let hi = hi.max(lo);
    RecordedStream {
        descriptor: stream.descriptor.clone(),
        timestamps: stream.timestamps[lo..hi].to_vec(),
        rows: stream.rows[lo..hi].to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    /// Frames at each sample instant of this stream.
    Stream(SignalKey),
    /// Frames every `1000 / hz` ms from the earliest sample of any stream to
    /// the latest.
    FixedRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Closest sample; equidistant neighbours resolve to the earlier one.
    Nearest,
    /// Latest sample at or before the reference instant.
    LastBefore,
}

/// The sample paired with a reference instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub t: Timestamp,
    pub values: Vec<SampleValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFrame {
    pub t: Timestamp,
    /// Streams without a qualifying sample have no entry.
    pub cells: BTreeMap<SignalKey, Cell>,
}

/// Index of the sample chosen for `reference`, if one lies within tolerance.
pub fn pick(samples: &[Sample], reference: Timestamp, tolerance_ms: u64, strategy: Strategy) -> Option<usize> {
    let within = |i: usize| samples[i].t.0.abs_diff(reference.0) <= tolerance_ms;
    match strategy {
        Strategy::Nearest => {
            let first_at_or_after = samples.partition_point(|s| s.t < reference);
            let after = (first_at_or_after < samples.len()).then_some(first_at_or_after);
            let before = first_at_or_after.checked_sub(1);
            let best = match (before, after) {
                (Some(b), Some(a)) => {
                    let db = reference.0 - samples[b].t.0;
                    let da = samples[a].t.0 - reference.0;
                    if da < db {
                        a
                    } else {
                        b
                    }
                }
                (Some(b), None) => b,
                (None, Some(a)) => a,
                (None, None) => return None,
            };
            within(best).then_some(best)
        }
        Strategy::LastBefore => {
            let idx = samples.partition_point(|s| s.t <= reference).checked_sub(1)?;
            within(idx).then_some(idx)
        }
    }
}

/// Aligns streams (each sorted by timestamp) on a reference timeline.
pub fn align(
    streams: &[(SignalKey, &[Sample])],
    reference: &Reference,
    tolerance_ms: u64,
    strategy: Strategy,
) -> Result<Vec<AlignedFrame>, SyncError> {
    for (key, samples) in streams {
        if let Some(pos) = samples.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(SyncError::UnsortedInput {
                device_id: key.device_id.clone(),
                signal: key.signal.clone(),
                position: pos + 1,
            });
        }
    }
    let instants: Vec<Timestamp> = match reference {
        Reference::Stream(key) => {
            let (_, samples) = streams
                .iter()
                .find(|(k, _)| k == key)
                .ok_or_else(|| SyncError::UnknownReference(key.to_string()))?;
            samples.iter().map(|s| s.t).collect()
        }
        Reference::FixedRate(hz) => {
            if !(hz.is_finite() && *hz > 0.0) {
                return Err(SyncError::UnknownReference(format!("fixed rate {hz} Hz")));
            }
            let first = streams.iter().filter_map(|(_, s)| s.first().map(|x| x.t)).min();
            let last = streams.iter().filter_map(|(_, s)| s.last().map(|x| x.t)).max();
            match (first, last) {
                (Some(first), Some(last)) => {
                    let period = 1000.0 / hz;
                    (0u64..)
                        .map(|k| Timestamp(first.0 + (k as f64 * period).round() as u64))
                        .take_while(|t| *t <= last)
                        .collect()
                }
                _ => Vec::new(),
            }
        }
    };

    Ok(instants
        .into_iter()
        .map(|t| {
            let cells = streams
                .iter()
                .filter_map(|(key, samples)| {
                    pick(samples, t, tolerance_ms, strategy).map(|i| {
                        (
                            key.clone(),
                            Cell {
                                t: samples[i].t,
                                values: samples[i].values.clone(),
                            },
                        )
                    })
                })
                .collect();
            AlignedFrame { t, cells }
        })
        .collect())
}
