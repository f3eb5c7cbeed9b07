//! Line-delimited JSON framing for the hub protocol.
//!
//! Each frame is one UTF-8 JSON object followed by a single `\n`. Encoding is
//! canonical: `"type"` comes first and every other object key (at any depth)
//! is emitted in lexicographic order, so equal messages encode to equal bytes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{Sample, SampleValue, SignalDescriptor, SignalKey, Timestamp, TransformSpec};

/// Default upper bound for a single frame, newline excluded.
pub const DEFAULT_MAX_FRAME_BYTES: usize = 1 << 20;

const KNOWN_TYPES: [&str; 7] = [
    "hello", "catalog", "subscribe", "ack", "data", "control", "error",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("encode error: {reason}")]
    Encode { reason: String },
    #[error("decode error: {reason}")]
    Decode { reason: String },
    #[error("frame of {len} bytes exceeds limit of {max}")]
    FrameTooLarge { len: usize, max: usize },
}

impl WireError {
    fn decode(reason: impl Into<String>) -> Self {
        WireError::Decode {
            reason: reason.into(),
        }
    }

    fn encode(reason: impl Into<String>) -> Self {
        WireError::Encode {
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Device,
    Client,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub role: Role,
    pub id: String,
    /// Descriptors being registered; only meaningful for `role = device`.
    #[serde(default)]
    pub signals: Vec<SignalDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFrame {
    pub device_id: String,
    pub signal: String,
    pub t: Timestamp,
    pub values: Vec<SampleValue>,
    /// Set on frames produced by epoch extraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<String>,
}

impl DataFrame {
    pub fn into_sample(self) -> Sample {
        Sample {
            device_id: self.device_id,
            signal: self.signal,
            t: self.t,
            values: self.values,
        }
    }
}

impl From<Sample> for DataFrame {
    fn from(s: Sample) -> Self {
        DataFrame {
            device_id: s.device_id,
            signal: s.signal,
            t: s.t,
            values: s.values,
            epoch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello(Hello),
    Catalog {
        signals: Vec<SignalDescriptor>,
    },
    Subscribe {
        selection: Vec<SignalKey>,
        #[serde(default)]
        transforms: Vec<TransformSpec>,
    },
    Ack {
        of: String,
        ok: bool,
        #[serde(default)]
        detail: String,
    },
    Data(DataFrame),
    Control {
        action: String,
        #[serde(default)]
        params: BTreeMap<String, Value>,
    },
    Error {
        code: String,
        message: String,
    },
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Hello(_) => "hello",
            Message::Catalog { .. } => "catalog",
            Message::Subscribe { .. } => "subscribe",
            Message::Ack { .. } => "ack",
            Message::Data(_) => "data",
            Message::Control { .. } => "control",
            Message::Error { .. } => "error",
        }
    }

    pub fn ack(of: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Message::Ack {
            of: of.into(),
            ok,
            detail: detail.into(),
        }
    }

    pub fn error(code: impl Into<String>, message: impl Into<String>) -> Self {
        Message::Error {
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn data(sample: Sample) -> Self {
        Message::Data(sample.into())
    }

    /// Checks the invariants that JSON serialization alone would not catch.
    fn check_encodable(&self) -> Result<(), WireError> {
        let descriptors: &[SignalDescriptor] = match self {
            Message::Hello(h) => &h.signals,
            Message::Catalog { signals } => signals,
            Message::Data(d) => {
                if d.values.iter().any(|v| !v.is_finite()) {
                    return Err(WireError::encode("non-finite number in values"));
                }
                &[]
            }
            _ => &[],
        };
        if descriptors.iter().any(|d| !d.rate_hz.is_finite()) {
            return Err(WireError::encode("non-finite rate_hz"));
        }
        Ok(())
    }
}

/// Encodes `m` as one canonical frame, trailing newline included.
pub fn encode_frame(m: &Message) -> Result<Vec<u8>, WireError> {
    m.check_encodable()?;
    let value = serde_json::to_value(m).map_err(|e| WireError::encode(e.to_string()))?;
    let Value::Object(mut fields) = value else {
        return Err(WireError::encode("message did not serialize to an object"));
    };
    let type_value = fields
        .remove("type")
        .ok_or_else(|| WireError::encode("missing type"))?;

    let mut out = Vec::with_capacity(128);
    out.extend_from_slice(b"{\"type\":");
    write_canonical(&mut out, &type_value);
    let mut keys: Vec<&String> = fields.keys().collect();
    keys.sort();
    for key in keys {
        out.push(b',');
        write_string(&mut out, key);
        out.push(b':');
        write_canonical(&mut out, &fields[key]);
    }
    out.extend_from_slice(b"}\n");
    Ok(out)
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    // serde_json never fails writing a str into a Vec.
    serde_json::to_writer(&mut *out, s).expect("string serialization");
}

fn write_canonical(out: &mut Vec<u8>, value: &Value) {
    match value {
        Value::Object(map) => {
            out.push(b'{');
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(out, key);
                out.push(b':');
                write_canonical(out, &map[key]);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(out, item);
            }
            out.push(b']');
        }
        scalar => serde_json::to_writer(&mut *out, scalar).expect("scalar serialization"),
    }
}

/// Decodes one frame (without its trailing newline).
pub fn decode_frame(line: &[u8]) -> Result<Message, WireError> {
    let value: Value = serde_json::from_slice(line)
        .map_err(|e| WireError::decode(format!("malformed JSON: {e}")))?;
    let Some(obj) = value.as_object() else {
        return Err(WireError::decode("frame is not a JSON object"));
    };
    match obj.get("type") {
        None => return Err(WireError::decode("missing type")),
        Some(Value::String(t)) if KNOWN_TYPES.contains(&t.as_str()) => {}
        Some(Value::String(_)) => return Err(WireError::decode("unknown type")),
        Some(_) => return Err(WireError::decode("type must be a string")),
    }
    Message::deserialize(value).map_err(|e| WireError::decode(e.to_string()))
}

/// Re-frames an arbitrarily chunked byte stream on `\n`.
///
/// A line that grows past `max_frame_bytes` poisons the reader: the error is
/// reported once and all further input is ignored.
#[derive(Debug)]
pub struct FrameReader {
    buf: Vec<u8>,
    scanned: usize,
    max_frame_bytes: usize,
    poisoned: bool,
}

impl Default for FrameReader {
    fn default() -> Self {
        FrameReader::new(DEFAULT_MAX_FRAME_BYTES)
    }
}

impl FrameReader {
    pub fn new(max_frame_bytes: usize) -> Self {
        FrameReader {
            buf: Vec::new(),
            scanned: 0,
            max_frame_bytes,
            poisoned: false,
        }
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    /// Bytes held waiting for a newline.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    /// Feeds a chunk and returns every complete raw line it finished.
    /// Whitespace-only lines are skipped.
    pub fn push_raw(&mut self, chunk: &[u8]) -> Vec<Result<Vec<u8>, WireError>> {
        let mut out = Vec::new();
        if self.poisoned {
            return out;
        }
        self.buf.extend_from_slice(chunk);

        let mut start = 0;
        let mut search_from = self.scanned;
        while let Some(offset) = self.buf[search_from..].iter().position(|&b| b == b'\n') {
            let end = search_from + offset;
            let line = &self.buf[start..end];
            if line.len() > self.max_frame_bytes {
                self.poison(line.len(), &mut out);
                return out;
            }
            if !line.iter().all(u8::is_ascii_whitespace) {
                out.push(Ok(line.to_vec()));
            }
            start = end + 1;
            search_from = start;
        }
        self.buf.drain(..start);
        self.scanned = self.buf.len();
        if self.buf.len() > self.max_frame_bytes {
            let len = self.buf.len();
            self.poison(len, &mut out);
        }
        out
    }

    /// Feeds a chunk and decodes every complete frame. A bad frame yields an
    /// error in its slot without affecting its neighbours.
    pub fn push(&mut self, chunk: &[u8]) -> Vec<Result<Message, WireError>> {
        self.push_raw(chunk)
            .into_iter()
            .map(|line| line.and_then(|l| decode_frame(&l)))
            .collect()
    }

    fn poison(&mut self, len: usize, out: &mut Vec<Result<Vec<u8>, WireError>>) {
        self.poisoned = true;
        self.buf = Vec::new();
        self.scanned = 0;
        out.push(Err(WireError::FrameTooLarge {
            len,
            max: self.max_frame_bytes,
        }));
    }
}
