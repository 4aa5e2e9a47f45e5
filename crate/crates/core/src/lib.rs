//! Event graph walker: replays a DAG of concurrent single-character edits into
//! a converged text document, merges new events incrementally and stores the
//! graph in a compact columnar file format.

pub mod causal_graph;
pub mod document;
pub mod index_tree;
pub mod internal_state;
pub mod oracle;
pub mod replay;
pub mod storage;
pub mod synth;

pub use causal_graph::{Event, EventGraph, EventId, Frontier, GraphError, LocalIdx, Operation};
pub use document::{Document, DocumentError};
pub use internal_state::{live_merge_states, Counters, MergeState, StateError};
pub use replay::{
    checkout, checkout_ops, merge_new, replay_all, replay_cost_profile, replay_document, replay_with, Checkpoint,
    MergeOutput, ReplayError, ReplayOptions, ReplayOutput, TransformedOp,
};
pub use storage::{decode, encode, DecodeOptions, StorageError, TraceJson, TraceStats};
