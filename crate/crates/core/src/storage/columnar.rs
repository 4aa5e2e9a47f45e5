//! Columnar binary encoding of event graphs.
//!
//! Layout: `EGWK`, a format byte, then columns as (id byte, LEB128 length,
//! payload) in the fixed order ops, content, parents, agents, and optionally
//! snapshot. Events are stored in local-index order.
//!
//! * ops: runs of `len << 3 | step << 1 | kind` then the zigzag delta of the
//!   run's first position from the previous run's last. `kind` is 0 for
//!   insert, 1 for delete; `step` codes the position change inside the run
//!   (0: +1, 1: 0, 2: -1).
//! * content: UTF-8 of every inserted character, in order.
//! * parents: events whose parents are not just "the previous event". Each
//!   entry is the gap since the last listed event, the parent count, and one
//!   reference per parent: `distance << 1` for an event in the same frame, or
//!   `1` followed by an inline agent name and seq for one outside it.
//! * agents: runs of (agent ref, first seq, count). An agent ref is
//!   `index << 1 | 1` for a name seen before, or `0` and an inline name.
//! * snapshot: frontier size, frontier positions, then the document's UTF-8.

use std::collections::HashMap;

use super::leb128::{unzigzag, write_u64, write_usize, zigzag, Reader, VarintError};
use super::{StorageError, Violation};
use crate::causal_graph::{Event, EventGraph, EventId, Frontier, LocalIdx, Operation};
use crate::document::Document;
use crate::internal_state::StateError;
use crate::replay::{self, ReplayError};

pub const MAGIC: &[u8; 4] = b"EGWK";
pub const FORMAT_VERSION: u8 = 1;

const COL_OPS: u8 = 1;
const COL_CONTENT: u8 = 2;
const COL_PARENTS: u8 = 3;
const COL_AGENTS: u8 = 4;
const COL_SNAPSHOT: u8 = 5;
/// Reserved for compressed payloads; no codec is implemented.
const COMPRESSED: u8 = 0x80;

const KIND_INS: u64 = 0;
const KIND_DEL: u64 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Replay the graph to check that every index exists.
    pub verify_indexes: bool,
}

impl DecodeOptions {
    pub fn verified() -> Self {
        DecodeOptions { verify_indexes: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub version: Frontier,
    pub document: Document,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub graph: EventGraph,
    pub snapshot: Option<Snapshot>,
}

fn write_column(out: &mut Vec<u8>, id: u8, payload: &[u8]) {
    out.push(id);
    write_usize(out, payload.len());
    out.extend_from_slice(payload);
}

fn write_name(out: &mut Vec<u8>, name: &str) {
    write_usize(out, name.len());
    out.extend_from_slice(name.as_bytes());
}

struct OpRun {
    kind: u64,
    step: i64,
    start: usize,
    len: usize,
}

impl OpRun {
    fn last(&self) -> usize {
        (self.start as i64 + self.step * (self.len as i64 - 1)) as usize
    }

    fn extend(&mut self, kind: u64, pos: usize) -> bool {
        if kind != self.kind {
            return false;
        }
        let delta = pos as i64 - self.last() as i64;
        if self.len == 1 && (-1..=1).contains(&delta) {
            self.step = delta;
        } else if delta != self.step {
            return false;
        }
        self.len += 1;
        true
    }

    fn write(&self, out: &mut Vec<u8>, prev_last: usize) {
        let code = match self.step {
            1 => 0,
            0 => 1,
            _ => 2,
        };
        write_u64(out, (self.len as u64) << 3 | code << 1 | self.kind);
        write_u64(out, zigzag(self.start as i64 - prev_last as i64));
    }
}

fn encode_frame(graph: &EventGraph, events: &[LocalIdx], snapshot: Option<&Document>) -> Vec<u8> {
    let mut frame_pos = vec![usize::MAX; graph.len()];
    for (i, &e) in events.iter().enumerate() {
        frame_pos[e] = i;
    }

    let mut ops = Vec::new();
    let mut content = String::new();
    let mut run: Option<OpRun> = None;
    let mut prev_last = 0;
    for &e in events {
        let (kind, pos) = match graph.op(e) {
            Operation::Insert { pos, content: c } => {
                content.push(c);
                (KIND_INS, pos)
            }
            Operation::Delete { pos } => (KIND_DEL, pos),
        };
        if let Some(r) = run.as_mut() {
            if r.extend(kind, pos) {
                continue;
            }
            r.write(&mut ops, prev_last);
            prev_last = r.last();
        }
        run = Some(OpRun { kind, step: 1, start: pos, len: 1 });
    }
    if let Some(r) = run {
        r.write(&mut ops, prev_last);
    }

    let mut parents = Vec::new();
    let mut next_listed = 0;
    for (i, &e) in events.iter().enumerate() {
        let ps = graph.parents(e);
        if i > 0 && ps.len() == 1 && ps[0] == events[i - 1] {
            continue;
        }
        write_usize(&mut parents, i - next_listed);
        next_listed = i + 1;
        write_usize(&mut parents, ps.len());
        for &p in ps {
            match frame_pos[p] {
                usize::MAX => {
                    write_u64(&mut parents, 1);
                    write_name(&mut parents, graph.agent_of(p));
                    write_u64(&mut parents, graph.seq_of(p));
                }
                fp => write_usize(&mut parents, (i - fp) << 1),
            }
        }
    }

    let mut agents = Vec::new();
    let mut names: HashMap<u32, usize> = HashMap::new();
    let mut k = 0;
    while k < events.len() {
        let agent = graph.agent_index_of(events[k]);
        let first = graph.seq_of(events[k]);
        let mut count = 1;
        while k + count < events.len()
            && graph.agent_index_of(events[k + count]) == agent
            && graph.seq_of(events[k + count]) == first + count as u64
        {
            count += 1;
        }
        match names.get(&agent) {
            Some(&n) => write_usize(&mut agents, n << 1 | 1),
            None => {
                names.insert(agent, names.len());
                write_u64(&mut agents, 0);
                write_name(&mut agents, graph.agent_of(events[k]));
            }
        }
        write_u64(&mut agents, first);
        write_usize(&mut agents, count);
        k += count;
    }

    let mut out = Vec::with_capacity(ops.len() + content.len() + parents.len() + agents.len() + 16);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    write_column(&mut out, COL_OPS, &ops);
    write_column(&mut out, COL_CONTENT, content.as_bytes());
    write_column(&mut out, COL_PARENTS, &parents);
    write_column(&mut out, COL_AGENTS, &agents);
    if let Some(doc) = snapshot {
        let mut snap = Vec::new();
        let version = graph.version();
        write_usize(&mut snap, version.len());
        for f in version.iter() {
            write_usize(&mut snap, f);
        }
        snap.extend_from_slice(&doc.snapshot_text());
        write_column(&mut out, COL_SNAPSHOT, &snap);
    }
    out
}

/// Encodes the whole graph. `snapshot` should be the document at the graph's
/// version; it is stored so loading can skip replay.
pub fn encode(graph: &EventGraph, snapshot: Option<&Document>) -> Vec<u8> {
    let all: Vec<LocalIdx> = (0..graph.len()).collect();
    encode_frame(graph, &all, snapshot)
}

/// Encodes some events for sending elsewhere. Parents outside the subset are
/// written as event ids.
pub fn encode_subset(graph: &EventGraph, events: &[LocalIdx]) -> Vec<u8> {
    let mut events = events.to_vec();
    events.sort_unstable();
    events.dedup();
    encode_frame(graph, &events, None)
}

enum ParentRef {
    Local(usize),
    External(EventId),
}

struct RawEvent {
    agent: usize,
    seq: u64,
    parents: Vec<ParentRef>,
    op: Operation,
}

struct Frame {
    names: Vec<String>,
    events: Vec<RawEvent>,
    snapshot: Option<(Vec<usize>, Vec<u8>)>,
}

fn malformed(msg: impl Into<String>) -> StorageError {
    StorageError::Malformed(msg.into())
}

fn in_column(column: u8) -> impl Fn(VarintError) -> StorageError {
    move |e| match e {
        VarintError::Truncated => StorageError::TruncatedColumn { column },
        VarintError::Overflow => malformed(format!("integer overflow in column {column}")),
    }
}

fn read_name(r: &mut Reader<'_>, column: u8) -> Result<String, StorageError> {
    let len = r.read_usize().map_err(in_column(column))?;
    let bytes = r.read_bytes(len).map_err(in_column(column))?;
    let name = std::str::from_utf8(bytes).map_err(|_| malformed("agent name is not UTF-8"))?;
    if name.is_empty() {
        return Err(malformed("empty agent name"));
    }
    Ok(name.to_string())
}

/// Deletes a subset frame may make of characters inserted outside it.
const FRAME_EXTERNAL_DELETES: usize = 1 << 24;

fn parse_frame(bytes: &[u8], external_deletes: usize) -> Result<Frame, StorageError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(StorageError::BadMagic);
    }
    let mut r = Reader::new(&bytes[MAGIC.len()..]);
    let version = r.read_u8().map_err(|_| StorageError::BadMagic)?;
    if version != FORMAT_VERSION {
        return Err(StorageError::UnsupportedVersion(version));
    }

    let mut columns: Vec<&[u8]> = Vec::with_capacity(5);
    let mut snapshot_col = None;
    while !r.is_empty() {
        let id = r.read_u8().map_err(|_| malformed("truncated column header"))?;
        if id & COMPRESSED != 0 {
            return Err(malformed(format!("column {} is compressed, which is not supported", id & !COMPRESSED)));
        }
        let expected = columns.len() as u8 + 1;
        if id != expected || snapshot_col.is_some() {
            return Err(malformed(format!("unexpected column {id}")));
        }
        let len = r.read_usize().map_err(in_column(id))?;
        let payload = r.read_bytes(len).map_err(in_column(id))?;
        if id == COL_SNAPSHOT {
            snapshot_col = Some(payload);
        } else {
            columns.push(payload);
        }
    }
    if columns.len() < 4 {
        return Err(malformed(format!("missing column {}", columns.len() + 1)));
    }

    let content = std::str::from_utf8(columns[(COL_CONTENT - 1) as usize])
        .map_err(|_| malformed("content column is not UTF-8"))?;
    let mut chars = content.chars();
    let char_count = content.chars().count();

    let mut ops: Vec<Operation> = Vec::new();
    // Deletes along one chain of events each remove a different character, and
    // every extra chain costs at least two bytes of the parents column. This
    // bounds the event count before anything is allocated for it.
    let delete_budget =
        char_count.saturating_mul(columns[(COL_PARENTS - 1) as usize].len() / 2 + 1).saturating_add(external_deletes);
    let mut deletes = 0;
    let mut r = Reader::new(columns[(COL_OPS - 1) as usize]);
    let mut prev_last: i64 = 0;
    while !r.is_empty() {
        let tag = r.read_u64().map_err(in_column(COL_OPS))?;
        let kind = tag & 1;
        let step = match (tag >> 1) & 3 {
            0 => 1,
            1 => 0,
            2 => -1,
            _ => return Err(malformed("bad step code in ops column")),
        };
        let len = tag >> 3;
        if len == 0 {
            return Err(malformed("empty op run"));
        }
        let start = prev_last
            .checked_add(unzigzag(r.read_u64().map_err(in_column(COL_OPS))?))
            .ok_or_else(|| malformed("op position overflow"))?;
        for j in 0..len {
            let pos = start + step * j as i64;
            if pos < 0 {
                return Err(malformed("negative op position"));
            }
            let pos = pos as usize;
            if kind == KIND_INS {
                let c = chars.next().ok_or_else(|| malformed("content column shorter than the inserts"))?;
                ops.push(Operation::Insert { pos, content: c });
            } else {
                deletes += 1;
                if deletes > delete_budget {
                    return Err(malformed("more deletes than the other columns allow"));
                }
                ops.push(Operation::Delete { pos });
            }
            prev_last = pos as i64;
        }
    }
    if chars.next().is_some() {
        return Err(malformed("content column longer than the inserts"));
    }
    let n = ops.len();

    let mut parents: Vec<Option<Vec<ParentRef>>> = (0..n).map(|_| None).collect();
    let mut r = Reader::new(columns[(COL_PARENTS - 1) as usize]);
    let mut next_listed = 0usize;
    while !r.is_empty() {
        let i = next_listed
            .checked_add(r.read_usize().map_err(in_column(COL_PARENTS))?)
            .filter(|&i| i < n)
            .ok_or_else(|| malformed("parents entry names a missing event"))?;
        next_listed = i + 1;
        let count = r.read_usize().map_err(in_column(COL_PARENTS))?;
        let mut refs = Vec::with_capacity(count.min(16));
        for _ in 0..count {
            let code = r.read_usize().map_err(in_column(COL_PARENTS))?;
            if code == 1 {
                let agent = read_name(&mut r, COL_PARENTS)?;
                let seq = r.read_u64().map_err(in_column(COL_PARENTS))?;
                refs.push(ParentRef::External(EventId::new(agent, seq)));
            } else if code & 1 == 0 && code >> 1 <= i {
                refs.push(ParentRef::Local(i - (code >> 1)));
            } else {
                return Err(malformed(format!("bad parent reference for event {i}")));
            }
        }
        parents[i] = Some(refs);
    }

    let mut names: Vec<String> = Vec::new();
    let mut ids: Vec<(usize, u64)> = Vec::with_capacity(n);
    let mut r = Reader::new(columns[(COL_AGENTS - 1) as usize]);
    while !r.is_empty() {
        let code = r.read_usize().map_err(in_column(COL_AGENTS))?;
        let agent = if code == 0 {
            names.push(read_name(&mut r, COL_AGENTS)?);
            names.len() - 1
        } else if code & 1 == 1 && code >> 1 < names.len() {
            code >> 1
        } else {
            return Err(malformed("bad agent reference"));
        };
        let first = r.read_u64().map_err(in_column(COL_AGENTS))?;
        let count = r.read_usize().map_err(in_column(COL_AGENTS))?;
        if count > n - ids.len() {
            return Err(malformed("agent runs cover more events than the ops column"));
        }
        for j in 0..count as u64 {
            let seq = first.checked_add(j).ok_or_else(|| malformed("sequence number overflow"))?;
            ids.push((agent, seq));
        }
    }
    if ids.len() != n {
        return Err(malformed("agent runs cover fewer events than the ops column"));
    }

    let events = ops
        .into_iter()
        .zip(ids)
        .zip(parents)
        .enumerate()
        .map(|(i, ((op, (agent, seq)), ps))| RawEvent {
            agent,
            seq,
            parents: ps.unwrap_or_else(|| if i == 0 { Vec::new() } else { vec![ParentRef::Local(i - 1)] }),
            op,
        })
        .collect();

    let snapshot = match snapshot_col {
        None => None,
        Some(payload) => {
            let mut r = Reader::new(payload);
            let count = r.read_usize().map_err(in_column(COL_SNAPSHOT))?;
            let mut version = Vec::with_capacity(count.min(16));
            for _ in 0..count {
                version.push(r.read_usize().map_err(in_column(COL_SNAPSHOT))?);
            }
            let text = payload[r.position()..].to_vec();
            Some((version, text))
        }
    };
    Ok(Frame { names, events, snapshot })
}

fn replay_violation(graph: &EventGraph, err: ReplayError) -> Violation {
    match err {
        ReplayError::State(StateError::IndexOutOfRange { event, pos, len }) => {
            Violation::IndexOutOfRange { event: graph.id_of(event), pos, len }
        }
        ReplayError::Graph(g) => Violation::Graph(g),
        other => Violation::Replay(other),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Decoded, StorageError> {
    decode_with(bytes, DecodeOptions::verified())
}

pub fn decode_with(bytes: &[u8], options: DecodeOptions) -> Result<Decoded, StorageError> {
    let frame = parse_frame(bytes, 0)?;
    let mut graph = EventGraph::new();
    let mut local: Vec<LocalIdx> = Vec::new();
    for raw in &frame.events {
        local.clear();
        for p in &raw.parents {
            match p {
                ParentRef::Local(p) => local.push(*p),
                ParentRef::External(id) => {
                    let event = EventId::new(frame.names[raw.agent].clone(), raw.seq);
                    return Err(Violation::Graph(crate::GraphError::MissingParent { event, parent: id.clone() }).into());
                }
            }
        }
        graph.push_with_seq(&frame.names[raw.agent], raw.seq, &local, raw.op).map_err(Violation::Graph)?;
    }

    let snapshot = match frame.snapshot {
        None => None,
        Some((version, text)) => {
            if version.iter().any(|&v| v >= graph.len()) {
                return Err(malformed("snapshot version names a missing event"));
            }
            let version = Frontier::from(version.as_slice());
            graph.check_frontier(&version).map_err(Violation::Graph)?;
            let text = std::str::from_utf8(&text).map_err(|_| malformed("snapshot is not UTF-8"))?;
            Some(Snapshot { version, document: Document::from(text) })
        }
    };

    if options.verify_indexes {
        match &snapshot {
            Some(snap) => {
                let doc = replay::checkout(&graph, &snap.version).map_err(|e| replay_violation(&graph, e))?;
                if doc != snap.document {
                    return Err(Violation::SnapshotMismatch.into());
                }
                if snap.version != *graph.version() {
                    replay::replay_all(&graph).map_err(|e| replay_violation(&graph, e))?;
                }
            }
            None => {
                replay::replay_all(&graph).map_err(|e| replay_violation(&graph, e))?;
            }
        }
    }
    Ok(Decoded { graph, snapshot })
}

/// Decodes a frame written by [`encode_subset`] into events whose parents are
/// given by id, ready for [`EventGraph::add_batch`].
pub fn decode_events(bytes: &[u8]) -> Result<Vec<Event>, StorageError> {
    let frame = parse_frame(bytes, FRAME_EXTERNAL_DELETES)?;
    let ids: Vec<EventId> =
        frame.events.iter().map(|raw| EventId::new(frame.names[raw.agent].clone(), raw.seq)).collect();
    Ok(frame
        .events
        .into_iter()
        .zip(&ids)
        .map(|(raw, id)| {
            let parents = raw
                .parents
                .into_iter()
                .map(|p| match p {
                    ParentRef::Local(p) => ids[p].clone(),
                    ParentRef::External(id) => id,
                })
                .collect();
            Event::new(id.clone(), parents, raw.op)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal_graph::tests::helo_graph;
    use crate::replay::tests::hey_graph;

    #[test]
    fn empty_graph_is_header_and_four_empty_columns() {
        let bytes = encode(&EventGraph::new(), None);
        assert_eq!(bytes, b"EGWK\x01\x01\x00\x02\x00\x03\x00\x04\x00");
        assert!(decode(&bytes).unwrap().graph.is_empty());
    }

    #[test]
    fn single_insert_columns() {
        let mut g = EventGraph::new();
        g.push("A", &[], Operation::Insert { pos: 0, content: 'a' }).unwrap();
        let bytes = encode(&g, None);
        let mut expected = b"EGWK\x01".to_vec();
        // ops: one insert run of length 1 at 0
        expected.extend([1, 2, 0x08, 0x00]);
        expected.extend([2, 1, 0x61]);
        // parents: event 0 listed with no parents
        expected.extend([3, 2, 0x00, 0x00]);
        // agents: new name "A", seq 0, one event
        expected.extend([4, 5, 0x00, 0x01, b'A', 0x00, 0x01]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn typing_run_is_one_op_run() {
        let mut g = EventGraph::new();
        let mut last = vec![];
        for (i, c) in "hello".chars().enumerate() {
            last = vec![g.push("A", &last, Operation::Insert { pos: i, content: c }).unwrap()];
        }
        for i in (0..5).rev() {
            last = vec![g.push("A", &last, Operation::Delete { pos: i }).unwrap()];
        }
        let bytes = encode(&g, None);
        // two runs of two bytes each
        assert_eq!(&bytes[5..11], &[1, 4, 5 << 3, 0, 5 << 3 | 2 << 1 | 1, 0]);
    }

    #[test]
    fn roundtrip_keeps_ids_parents_and_ops() {
        for g in [helo_graph(), hey_graph()] {
            let bytes = encode(&g, None);
            let back = decode(&bytes).unwrap().graph;
            assert_eq!(back.len(), g.len());
            for i in 0..g.len() {
                assert_eq!(back.event(i), g.event(i));
            }
            assert_eq!(encode(&back, None), bytes);
        }
    }

    #[test]
    fn snapshot_loads_without_replay() {
        let g = hey_graph();
        let doc = replay::replay_document(&g).unwrap();
        let bytes = encode(&g, Some(&doc));
        let loaded = decode_with(&bytes, DecodeOptions::default()).unwrap();
        let snap = loaded.snapshot.unwrap();
        assert_eq!(snap.document.to_string(), "Hey!");
        assert_eq!(snap.version, *g.version());
        decode(&bytes).unwrap();
    }

    #[test]
    fn wrong_snapshot_is_rejected_when_verifying() {
        let g = hey_graph();
        let bytes = encode(&g, Some(&Document::from("Hi")));
        assert!(matches!(decode(&bytes), Err(StorageError::ValidationFailed(Violation::SnapshotMismatch))));
        assert!(decode_with(&bytes, DecodeOptions::default()).is_ok());
    }

    #[test]
    fn header_errors() {
        assert_eq!(decode(b"EGW").unwrap_err(), StorageError::BadMagic);
        assert_eq!(decode(b"NOPE\x01").unwrap_err(), StorageError::BadMagic);
        assert_eq!(decode(b"EGWK\x02").unwrap_err(), StorageError::UnsupportedVersion(2));
        assert!(matches!(decode(b"EGWK\x01\x81\x00"), Err(StorageError::Malformed(_))));
        assert!(matches!(decode(b"EGWK\x01\x01\x00"), Err(StorageError::Malformed(_))));
    }

    #[test]
    fn corrupted_length_is_truncation() {
        let mut bytes = encode(&helo_graph(), None);
        bytes[6] = 0x7f;
        assert_eq!(decode(&bytes).unwrap_err(), StorageError::TruncatedColumn { column: 1 });
        let bytes = encode(&helo_graph(), None);
        assert_eq!(decode(&bytes[..bytes.len() - 1]).unwrap_err(), StorageError::TruncatedColumn { column: 4 });
    }

    #[test]
    fn invalid_index_is_a_validation_failure() {
        let mut g = EventGraph::new();
        g.push("A", &[], Operation::Insert { pos: 0, content: 'a' }).unwrap();
        g.push("A", &[0], Operation::Delete { pos: 1 }).unwrap();
        let bytes = encode(&g, None);
        assert!(matches!(
            decode(&bytes),
            Err(StorageError::ValidationFailed(Violation::IndexOutOfRange { pos: 1, len: 1, .. }))
        ));
        assert_eq!(decode_with(&bytes, DecodeOptions::default()).unwrap().graph.len(), 2);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        // Two runs for agent A that both start at seq 0.
        let mut bytes = b"EGWK\x01".to_vec();
        bytes.extend([1, 2, 2 << 3, 0]);
        bytes.extend([2, 2, b'a', b'b']);
        bytes.extend([3, 2, 0, 0]);
        bytes.extend([4, 8, 0, 1, b'A', 0, 1, 1, 0, 1]);
        assert!(matches!(
            decode(&bytes),
            Err(StorageError::ValidationFailed(Violation::Graph(crate::GraphError::DuplicateId(_))))
        ));
    }

    #[test]
    fn subset_frames_reference_outside_parents_by_id() {
        let g = hey_graph();
        let bytes = encode_subset(&g, &[4, 5, 6, 7]);
        let events = decode_events(&bytes).unwrap();
        assert_eq!(events.len(), 4);
        for (e, idx) in events.iter().zip(4..) {
            assert_eq!(*e, g.event(idx));
        }
        assert!(matches!(
            decode(&bytes),
            Err(StorageError::ValidationFailed(Violation::Graph(crate::GraphError::MissingParent { .. })))
        ));
    }
}
