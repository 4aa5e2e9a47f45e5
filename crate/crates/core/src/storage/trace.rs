//! JSON editing traces.
//!
//! ```json
//! {"startContent": "", "events": [
//!   {"id": "A@0", "parents": [], "op": {"type": "ins", "pos": 0, "content": "hi"}}
//! ]}
//! ```
//!
//! A multi-character op becomes one event per character, chained, with
//! consecutive seqs starting at the op's id; a parent id that names such an
//! op means its last character. `startContent` becomes a chain of inserts by
//! [`PREAMBLE_AGENT`] that root-parented events build on.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal_graph::{EventGraph, EventId, GraphError, LocalIdx, Operation};

pub const PREAMBLE_AGENT: &str = "_preamble";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceJson {
    #[serde(rename = "startContent", default)]
    pub start_content: String,
    pub events: Vec<TraceEvent>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub id: String,
    pub parents: Vec<String>,
    pub op: TraceOp,
}

fn one() -> usize {
    1
}

fn is_one(n: &usize) -> bool {
    *n == 1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum TraceOp {
    Ins {
        pos: usize,
        content: String,
    },
    Del {
        pos: usize,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        len: usize,
    },
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: {source}")]
    Id { path: String, source: crate::causal_graph::ParseEventIdError },
    #[error("{path}: unknown parent {parent}")]
    UnknownParent { path: String, parent: String },
    #[error("{path}: op has no characters")]
    EmptyOp { path: String },
    #[error("{path}: {source}")]
    Graph { path: String, source: GraphError },
}

/// Parses trace JSON, reporting schema errors with their JSON path.
pub fn parse_trace(json: &str) -> Result<TraceJson, TraceError> {
    let de = &mut serde_json::Deserializer::from_str(json);
    serde_path_to_error::deserialize(de)
        .map_err(|e| TraceError::Schema { path: e.path().to_string(), message: e.into_inner().to_string() })
}

pub fn import_json(json: &str) -> Result<EventGraph, TraceError> {
    import_trace(&parse_trace(json)?)
}

pub fn import_trace(trace: &TraceJson) -> Result<EventGraph, TraceError> {
    let mut graph = EventGraph::new();
    let mut root: Vec<LocalIdx> = Vec::new();
    for (i, c) in trace.start_content.chars().enumerate() {
        let idx = graph
            .push_with_seq(PREAMBLE_AGENT, i as u64, &root, Operation::Insert { pos: i, content: c })
            .map_err(|source| TraceError::Graph { path: "startContent".into(), source })?;
        root = vec![idx];
    }

    let mut last_of: HashMap<&str, LocalIdx> = HashMap::new();
    for (j, ev) in trace.events.iter().enumerate() {
        let path = format!("events[{j}]");
        let id: EventId = ev.id.parse().map_err(|source| TraceError::Id { path: format!("{path}.id"), source })?;
        let mut parents = Vec::with_capacity(ev.parents.len());
        for (k, p) in ev.parents.iter().enumerate() {
            let idx = last_of.get(p.as_str()).copied().or_else(|| p.parse().ok().and_then(|pid| graph.idx_of(&pid)));
            parents.push(idx.ok_or_else(|| TraceError::UnknownParent {
                path: format!("{path}.parents[{k}]"),
                parent: p.clone(),
            })?);
        }
        if ev.parents.is_empty() {
            parents.clone_from(&root);
        }

        let ops: Vec<Operation> = match &ev.op {
            TraceOp::Ins { pos, content } => {
                content.chars().enumerate().map(|(k, c)| Operation::Insert { pos: pos + k, content: c }).collect()
            }
            TraceOp::Del { pos, len } => (0..*len).map(|_| Operation::Delete { pos: *pos }).collect(),
        };
        if ops.is_empty() {
            return Err(TraceError::EmptyOp { path: format!("{path}.op") });
        }
        for (k, op) in ops.into_iter().enumerate() {
            let idx = graph
                .push_with_seq(&id.agent, id.seq + k as u64, &parents, op)
                .map_err(|source| TraceError::Graph { path: path.clone(), source })?;
            parents = vec![idx];
        }
        last_of.insert(ev.id.as_str(), parents[0]);
    }
    Ok(graph)
}

/// Length of the leading chain that re-imports as `startContent`.
fn preamble_len(graph: &EventGraph) -> usize {
    let mut p = 0;
    while p < graph.len()
        && graph.agent_of(p) == PREAMBLE_AGENT
        && graph.seq_of(p) == p as u64
        && graph.parents(p).iter().copied().eq(p.checked_sub(1))
        && matches!(graph.op(p), Operation::Insert { pos, .. } if pos == p)
    {
        p += 1;
    }
    // Root-parented events after the preamble could not be told apart from
    // ones parented on its end.
    if (p..graph.len()).any(|e| graph.parents(e).is_empty()) {
        return 0;
    }
    p
}

/// The trace form of `graph`. With `coalesce`, runs of typing or forward
/// deletion by one author become single multi-character ops.
pub fn export_trace(graph: &EventGraph, coalesce: bool) -> TraceJson {
    let p = preamble_len(graph);
    let start_content: String = (0..p)
        .map(|e| match graph.op(e) {
            Operation::Insert { content, .. } => content,
            Operation::Delete { .. } => unreachable!("preamble holds only inserts"),
        })
        .collect();

    // Start of the run each event belongs to.
    let mut run_start: Vec<LocalIdx> = (0..graph.len()).collect();
    let mut runs: Vec<(LocalIdx, usize)> = Vec::new();
    let mut e = p;
    while e < graph.len() {
        let mut len = 1;
        if coalesce {
            while let Some(next) = Some(e + len).filter(|&n| n < graph.len()) {
                let prev = next - 1;
                let continues = graph.agent_of(next) == graph.agent_of(e)
                    && graph.seq_of(next) == graph.seq_of(prev) + 1
                    && graph.parents(next) == [prev]
                    && graph.children(prev) == [next]
                    && match (graph.op(e), graph.op(next)) {
                        (Operation::Insert { pos: a, .. }, Operation::Insert { pos: b, .. }) => b == a + len,
                        (Operation::Delete { pos: a }, Operation::Delete { pos: b }) => a == b,
                        _ => false,
                    };
                if !continues {
                    break;
                }
                run_start[next] = e;
                len += 1;
            }
        }
        runs.push((e, len));
        e += len;
    }

    let name = |x: LocalIdx| -> String {
        let start = run_start[x];
        let is_last = runs.binary_search_by_key(&start, |r| r.0).map(|k| start + runs[k].1 - 1 == x).unwrap_or(true);
        if start != x && is_last {
            graph.id_of(start).to_string()
        } else {
            graph.id_of(x).to_string()
        }
    };

    let events = runs
        .iter()
        .map(|&(start, len)| {
            let ps = graph.parents(start);
            let parents = if p > 0 && ps == [p - 1] { Vec::new() } else { ps.iter().map(|&x| name(x)).collect() };
            let op = match graph.op(start) {
                Operation::Insert { pos, .. } => TraceOp::Ins {
                    pos,
                    content: (start..start + len)
                        .map(|x| match graph.op(x) {
                            Operation::Insert { content, .. } => content,
                            Operation::Delete { .. } => unreachable!("insert runs hold only inserts"),
                        })
                        .collect(),
                },
                Operation::Delete { pos } => TraceOp::Del { pos, len },
            };
            TraceEvent { id: graph.id_of(start).to_string(), parents, op }
        })
        .collect();
    TraceJson { start_content, events }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::replay_document;

    const HELO: &str = r#"{"startContent": "", "events": [
        {"id": "A@0", "parents": [], "op": {"type": "ins", "pos": 0, "content": "Helo"}},
        {"id": "A@4", "parents": ["A@0"], "op": {"type": "ins", "pos": 3, "content": "l"}},
        {"id": "B@0", "parents": ["A@0"], "op": {"type": "ins", "pos": 4, "content": "!"}}
    ]}"#;

    #[test]
    fn helo_json_replays() {
        let g = import_json(HELO).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.parents(4), [3]);
        assert_eq!(replay_document(&g).unwrap().to_string(), "Hello!");
    }

    #[test]
    fn multi_char_insert_is_exploded() {
        let g = import_json(
            r#"{"events": [{"id": "A@0", "parents": [], "op": {"type": "ins", "pos": 0, "content": "hi"}}]}"#,
        )
        .unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.parents(1), [0]);
        assert_eq!(g.id_of(1), EventId::new("A", 1));
    }

    #[test]
    fn start_content_is_a_preamble() {
        let json = r#"{"startContent": "ab", "events": [
            {"id": "A@0", "parents": [], "op": {"type": "del", "pos": 0, "len": 2}}
        ]}"#;
        let g = import_json(json).unwrap();
        assert_eq!(g.agent_of(0), PREAMBLE_AGENT);
        assert_eq!(g.parents(2), [1]);
        assert_eq!(replay_document(&g).unwrap().to_string(), "");
        let back = export_trace(&g, true);
        assert_eq!(back.start_content, "ab");
        assert_eq!(
            back.events,
            vec![TraceEvent { id: "A@0".into(), parents: vec![], op: TraceOp::Del { pos: 0, len: 2 } }]
        );
    }

    #[test]
    fn schema_errors_carry_the_path() {
        let err = import_json(
            r#"{"events": [{"id": "A@0", "parents": [], "op": {"type": "ins", "pos": -1, "content": "x"}}]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().starts_with("events[0].op"), "{err}");
        let err = import_json(r#"{"events": [{"id": "A@0", "parents": ["Z@9"], "op": {"type": "del", "pos": 0}}]}"#)
            .unwrap_err();
        assert_eq!(err.to_string(), "events[0].parents[0]: unknown parent Z@9");
        let err =
            import_json(r#"{"events": [{"id": "nope", "parents": [], "op": {"type": "del", "pos": 0}}]}"#).unwrap_err();
        assert!(err.to_string().starts_with("events[0].id"));
    }

    #[test]
    fn empty_graph_exports_no_events() {
        assert_eq!(export_trace(&EventGraph::new(), true), TraceJson::default());
    }

    #[test]
    fn coalesced_export_roundtrips_helo() {
        let g = import_json(HELO).unwrap();
        let t = export_trace(&g, true);
        assert_eq!(t.events.len(), 3);
        assert_eq!(t.events[0].op, TraceOp::Ins { pos: 0, content: "Helo".into() });
        assert_eq!(t.events[1].parents, ["A@0"]);
        let back = import_trace(&t).unwrap();
        assert!((0..g.len()).all(|i| back.event(i) == g.event(i)));
    }
}
