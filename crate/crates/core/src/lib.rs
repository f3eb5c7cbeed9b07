//! Core of the Thalamus sensing simulator: domain types, the line-delimited
//! JSON codec, dataset ingest and replay, streaming signal transforms and
//! timeline synchronization. Everything here is synchronous and I/O-light;
//! the networked hub lives in `thalamus-hub`.

pub mod dsp;
pub mod ingest;
pub mod model;
pub mod sync;
pub mod wire;

pub use model::{
    is_missing, validate_descriptor, Sample, SampleValue, SignalDescriptor, SignalKey, Timestamp,
    TransformKind, TransformSpec, ValidationError,
};
pub use wire::{decode_frame, encode_frame, FrameReader, Message, WireError};
