//! Summary numbers for a trace.

use std::collections::HashSet;

use serde::Serialize;

use crate::causal_graph::{EventGraph, Frontier, Operation};
use crate::replay::{self, ReplayError};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceStats {
    pub events: usize,
    pub authors: usize,
    /// Maximal chains without branching or merging.
    pub runs: usize,
    pub inserted: usize,
    /// Share of inserted characters still present at the end, in percent.
    pub chars_remaining_pct: f64,
    pub final_size_bytes: usize,
    /// Mean number of extra concurrent branches when each event arrives.
    /// Only a rough proxy for concurrency.
    pub avg_concurrency: f64,
}

pub fn stats(graph: &EventGraph) -> Result<TraceStats, ReplayError> {
    let n = graph.len();
    let authors: HashSet<&str> = (0..n).map(|e| graph.agent_of(e)).collect();
    let runs = (0..n)
        .filter(|&e| match graph.parents(e) {
            [p] => graph.children(*p).len() != 1,
            _ => true,
        })
        .count();
    let inserted = (0..n).filter(|&e| matches!(graph.op(e), Operation::Insert { .. })).count();
    let doc = replay::replay_document(graph)?;

    let mut version = Frontier::root();
    let mut branches = 0usize;
    for e in 0..n {
        branches += version.len().saturating_sub(1);
        version.advance(graph.parents(e), e);
    }

    Ok(TraceStats {
        events: n,
        authors: authors.len(),
        runs,
        inserted,
        chars_remaining_pct: if inserted == 0 { 100.0 } else { 100.0 * doc.len() as f64 / inserted as f64 },
        final_size_bytes: doc.snapshot_text().len(),
        avg_concurrency: if n == 0 { 0.0 } else { branches as f64 / n as f64 },
    })
}
