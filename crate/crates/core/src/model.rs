//! Domain types shared by every part of the hub.
//!
//! Timestamps are integer milliseconds since the Unix epoch (UTC). A sample
//! value is either a finite number or an explicit `Missing` marker; numeric
//! sentinels such as `0` only appear when a transform asks for them.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

/// Wire token for a missing value.
pub const MISSING_TOKEN: &str = "NA";

/// Milliseconds since 1970-01-01T00:00:00 UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const fn from_millis(ms: u64) -> Self {
        Timestamp(ms)
    }

    pub const fn as_millis(self) -> u64 {
        self.0
    }

    /// Current system time, truncated to the millisecond.
    pub fn now() -> Self {
        let elapsed = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap_or_default();
        Timestamp(elapsed.as_millis() as u64)
    }

    pub fn saturating_add(self, ms: u64) -> Self {
        Timestamp(self.0.saturating_add(ms))
    }

    pub fn saturating_sub(self, ms: u64) -> Self {
        Timestamp(self.0.saturating_sub(ms))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u64(self.0)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct TsVisitor;

        impl Visitor<'_> for TsVisitor {
            type Value = Timestamp;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a non-negative integer millisecond timestamp")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Timestamp, E> {
                Ok(Timestamp(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Timestamp, E> {
                if v < 0 {
                    Err(E::custom("negative timestamp"))
                } else {
                    Ok(Timestamp(v as u64))
                }
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Timestamp, E> {
                if v < 0.0 {
                    Err(E::custom("negative timestamp"))
                } else {
                    Err(E::custom("timestamp must be an integer"))
                }
            }
        }

        deserializer.deserialize_any(TsVisitor)
    }
}

/// One channel reading: a finite number or an explicit missing marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleValue {
    Number(f64),
    Missing,
}

impl SampleValue {
    pub fn is_missing(&self) -> bool {
        matches!(self, SampleValue::Missing)
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            SampleValue::Number(v) => Some(*v),
            SampleValue::Missing => None,
        }
    }

    /// Maps the numeric payload; `Missing` passes through untouched.
    pub fn map(self, f: impl FnOnce(f64) -> f64) -> SampleValue {
        match self {
            SampleValue::Number(v) => SampleValue::Number(f(v)),
            SampleValue::Missing => SampleValue::Missing,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            SampleValue::Number(v) => v.is_finite(),
            SampleValue::Missing => true,
        }
    }
}

impl From<f64> for SampleValue {
    fn from(v: f64) -> Self {
        SampleValue::Number(v)
    }
}

/// Free-function form of [`SampleValue::is_missing`].
pub fn is_missing(v: &SampleValue) -> bool {
    v.is_missing()
}

impl Serialize for SampleValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            SampleValue::Number(v) if v.is_finite() => serializer.serialize_f64(*v),
            SampleValue::Number(_) => Err(serde::ser::Error::custom("non-finite number")),
            SampleValue::Missing => serializer.serialize_str(MISSING_TOKEN),
        }
    }
}

impl<'de> Deserialize<'de> for SampleValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ValueVisitor;

        impl Visitor<'_> for ValueVisitor {
            type Value = SampleValue;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a finite number or \"NA\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<SampleValue, E> {
                if v.is_finite() {
                    Ok(SampleValue::Number(v))
                } else {
                    Err(E::custom("non-finite number"))
                }
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<SampleValue, E> {
                Ok(SampleValue::Number(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<SampleValue, E> {
                Ok(SampleValue::Number(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<SampleValue, E> {
                if v == MISSING_TOKEN {
                    Ok(SampleValue::Missing)
                } else {
                    Err(E::custom(format!("unexpected string value {v:?}")))
                }
            }
        }

        deserializer.deserialize_any(ValueVisitor)
    }
}

/// Identifies one signal of one device.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SignalKey {
    pub device_id: String,
    pub signal: String,
}

impl SignalKey {
    pub fn new(device_id: impl Into<String>, signal: impl Into<String>) -> Self {
        SignalKey {
            device_id: device_id.into(),
            signal: signal.into(),
        }
    }
}

impl fmt::Display for SignalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.device_id, self.signal)
    }
}

/// One timestamped measurement; multi-channel signals share a single instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub device_id: String,
    pub signal: String,
    pub t: Timestamp,
    pub values: Vec<SampleValue>,
}

impl Sample {
    pub fn new(
        device_id: impl Into<String>,
        signal: impl Into<String>,
        t: Timestamp,
        values: Vec<SampleValue>,
    ) -> Self {
        Sample {
            device_id: device_id.into(),
            signal: signal.into(),
            t,
            values,
        }
    }

    pub fn key(&self) -> SignalKey {
        SignalKey::new(self.device_id.clone(), self.signal.clone())
    }

    pub fn matches(&self, key: &SignalKey) -> bool {
        self.device_id == key.device_id && self.signal == key.signal
    }
}

/// Metadata for one stream; the unit of the hub catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalDescriptor {
    pub device_id: String,
    pub signal: String,
    pub unit: String,
    pub rate_hz: f64,
    pub channels: u32,
}

impl SignalDescriptor {
    pub fn key(&self) -> SignalKey {
        SignalKey::new(self.device_id.clone(), self.signal.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid {field}: {reason}")]
pub struct ValidationError {
    pub field: String,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ValidationError {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub fn validate_descriptor(d: &SignalDescriptor) -> Result<(), ValidationError> {
    if d.device_id.is_empty() {
        return Err(ValidationError::new("device_id", "must not be empty"));
    }
    if d.signal.is_empty() {
        return Err(ValidationError::new("signal", "must not be empty"));
    }
    if !(d.rate_hz.is_finite() && d.rate_hz > 0.0) {
        return Err(ValidationError::new("rate_hz", "must be a positive finite number"));
    }
    if d.channels < 1 {
        return Err(ValidationError::new("channels", "must be at least 1"));
    }
    Ok(())
}

/// Which built-in transform a pipeline stage runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    MissingPolicy,
    Savgol,
    Kalman,
    Noise,
    Delay,
}

impl TransformKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransformKind::MissingPolicy => "missing_policy",
            TransformKind::Savgol => "savgol",
            TransformKind::Kalman => "kalman",
            TransformKind::Noise => "noise",
            TransformKind::Delay => "delay",
        }
    }
}

/// Declarative pipeline stage as it appears in config files and subscribe
/// frames. Parameters are checked by `dsp::Stage::from_spec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

impl TransformSpec {
    pub fn new(kind: TransformKind) -> Self {
        TransformSpec {
            kind,
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }
}
