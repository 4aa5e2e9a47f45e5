//! Binary and JSON persistence of event graphs.

mod columnar;
pub mod leb128;
mod stats;
mod trace;

use thiserror::Error;

use crate::causal_graph::{EventId, GraphError};
use crate::replay::ReplayError;

pub use columnar::{
    decode, decode_events, decode_with, encode, encode_subset, DecodeOptions, Decoded, Snapshot, FORMAT_VERSION, MAGIC,
};
pub use stats::{stats, TraceStats};
pub use trace::{
    export_trace, import_json, import_trace, parse_trace, TraceError, TraceEvent, TraceJson, TraceOp, PREAMBLE_AGENT,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StorageError {
    #[error("not an event graph file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("column {column} is truncated")]
    TruncatedColumn { column: u8 },
    #[error("invalid event graph: {0}")]
    ValidationFailed(#[from] Violation),
    #[error("malformed file: {0}")]
    Malformed(String),
}

/// Ways a decoded graph can fail to be a valid event graph.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Violation {
    #[error(transparent)]
    Graph(GraphError),
    #[error("event {event} uses index {pos} in a document of length {len}")]
    IndexOutOfRange { event: EventId, pos: usize, len: usize },
    #[error("replay failed: {0}")]
    Replay(ReplayError),
    #[error("stored snapshot differs from the replayed document")]
    SnapshotMismatch,
}
