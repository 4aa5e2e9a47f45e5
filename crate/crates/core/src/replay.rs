//! Walking the event graph: full replay, checkout of past versions and
//! merging new events into an existing document.
//!
//! A walk visits events in the branch-aware topological order. Whenever the
//! events seen so far form a critical version the merge state is dropped, and
//! events sandwiched between two critical versions are emitted unchanged
//! without building any state.

use std::collections::{BinaryHeap, HashSet};

use thiserror::Error;

use crate::causal_graph::{Event, EventGraph, Frontier, GraphError, LocalIdx, Operation};
use crate::document::{Document, DocumentError};
use crate::internal_state::{Counters, MergeState, StateError};

/// An index-based edit that applies to the document produced by the ops
/// emitted before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformedOp {
    Insert { pos: usize, content: char, source: LocalIdx },
    Delete { pos: usize, source: LocalIdx },
    Noop { source: LocalIdx },
}

impl TransformedOp {
    pub fn source(&self) -> LocalIdx {
        match *self {
            TransformedOp::Insert { source, .. }
            | TransformedOp::Delete { source, .. }
            | TransformedOp::Noop { source } => source,
        }
    }

    // The original op of an event whose parents are the current version.
    fn untransformed(op: Operation, source: LocalIdx) -> Self {
        match op {
            Operation::Insert { pos, content } => TransformedOp::Insert { pos, content, source },
            Operation::Delete { pos } => TransformedOp::Delete { pos, source },
        }
    }

    fn length_change(&self) -> isize {
        match self {
            TransformedOp::Insert { .. } => 1,
            TransformedOp::Delete { .. } => -1,
            TransformedOp::Noop { .. } => 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplayError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Document(#[from] DocumentError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplayOptions {
    /// Drop the merge state at critical versions.
    pub clear: bool,
    /// Emit events between two critical versions without touching any state.
    /// Only has an effect together with `clear`.
    pub fast_path: bool,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions { clear: true, fast_path: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplayOutput {
    pub ops: Vec<TransformedOp>,
    pub counters: Counters,
}

/// A document version together with its length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    pub version: Frontier,
    pub doc_length: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeOutput {
    pub ops: Vec<TransformedOp>,
    pub checkpoint: Checkpoint,
    pub counters: Counters,
}

/// Transformed ops for the whole graph, in sort order.
pub fn replay_all(graph: &EventGraph) -> Result<Vec<TransformedOp>, ReplayError> {
    Ok(replay_with(graph, ReplayOptions::default(), None)?.ops)
}

pub fn replay_document(graph: &EventGraph) -> Result<Document, ReplayError> {
    let mut doc = Document::new();
    doc.apply_all(&replay_all(graph)?)?;
    Ok(doc)
}

pub fn replay_cost_profile(graph: &EventGraph) -> Result<Counters, ReplayError> {
    Ok(replay_with(graph, ReplayOptions::default(), None)?.counters)
}

/// Replays the whole graph, in `order` if given (which must be a topological
/// order of every event) or in the default sort order otherwise.
pub fn replay_with(
    graph: &EventGraph,
    options: ReplayOptions,
    order: Option<&[LocalIdx]>,
) -> Result<ReplayOutput, ReplayError> {
    let default_order;
    let order = match order {
        Some(order) => {
            let all: Vec<LocalIdx> = (0..graph.len()).collect();
            graph.check_order(&all, order)?;
            order
        }
        None => {
            default_order = graph.sort_topological(&Frontier::root(), graph.version())?;
            &default_order
        }
    };
    let cuts = if options.clear { graph.critical_cuts() } else { Vec::new() };
    walk(graph, order, &cuts, options)
}

/// Replays without clearing and hands back the final merge state, for
/// inspecting record order and states.
pub fn replay_state<'g>(
    graph: &'g EventGraph,
    order: Option<&[LocalIdx]>,
) -> Result<(Vec<TransformedOp>, MergeState<'g>), ReplayError> {
    let default_order;
    let order = match order {
        Some(order) => {
            let all: Vec<LocalIdx> = (0..graph.len()).collect();
            graph.check_order(&all, order)?;
            order
        }
        None => {
            default_order = graph.sort_topological(&Frontier::root(), graph.version())?;
            &default_order
        }
    };
    let mut state = MergeState::with_base_len(graph, Frontier::root(), 0);
    let mut ops = Vec::with_capacity(order.len());
    for &e in order {
        state.set_prepare_version(graph.parents(e))?;
        ops.push(state.apply(e)?);
    }
    Ok((ops, state))
}

/// Transformed ops that build the document at version `v`.
pub fn checkout_ops(graph: &EventGraph, v: &Frontier) -> Result<Vec<TransformedOp>, ReplayError> {
    if v == graph.version() {
        return replay_all(graph);
    }
    let subset = graph.events_of(v)?;
    let order = graph.sort_subset(&subset);
    let cuts = graph.critical_cuts_within(&subset);
    Ok(walk(graph, &order, &cuts, ReplayOptions::default())?.ops)
}

/// The document at version `v`.
pub fn checkout(graph: &EventGraph, v: &Frontier) -> Result<Document, ReplayError> {
    let mut doc = Document::new();
    doc.apply_all(&checkout_ops(graph, v)?)?;
    Ok(doc)
}

// `cuts[k]` says whether the first k events of `order` form a critical
// version; ignored unless clearing.
fn walk(
    graph: &EventGraph,
    order: &[LocalIdx],
    cuts: &[bool],
    options: ReplayOptions,
) -> Result<ReplayOutput, ReplayError> {
    let mut ops = Vec::with_capacity(order.len());
    let mut counters = Counters::default();
    let mut state: Option<MergeState> = None;
    let mut processed = Frontier::root();
    let mut doc_len = 0usize;

    for (k, &e) in order.iter().enumerate() {
        let at_critical = options.clear && cuts[k];
        if at_critical {
            if let Some(s) = state.take() {
                counters.absorb(&s.counters());
                counters.clears += 1;
            }
        }
        let op = if at_critical && options.fast_path && cuts[k + 1] {
            counters.fast_path += 1;
            emit_as_is(graph, e, doc_len)?
        } else {
            let s = state.get_or_insert_with(|| MergeState::with_base_len(graph, processed.clone(), doc_len));
            s.set_prepare_version(graph.parents(e))?;
            s.apply(e)?
        };
        doc_len = doc_len.wrapping_add_signed(op.length_change());
        ops.push(op);
        processed.advance(graph.parents(e), e);
    }
    if let Some(s) = state.take() {
        counters.absorb(&s.counters());
    }
    Ok(ReplayOutput { ops, counters })
}

fn emit_as_is(graph: &EventGraph, e: LocalIdx, doc_len: usize) -> Result<TransformedOp, StateError> {
    let op = graph.op(e);
    let fits = match op {
        Operation::Insert { pos, .. } => pos <= doc_len,
        Operation::Delete { pos } => pos < doc_len,
    };
    if !fits {
        return Err(StateError::IndexOutOfRange { event: e, pos: op.pos(), len: doc_len });
    }
    Ok(TransformedOp::untransformed(op, e))
}

/// Adds `new_events` to the graph and updates `doc`, the document at
/// `current`, to include them. Returns the ops applied to `doc`.
///
/// Only the part of the graph since the latest critical version below both
/// `current` and the new events is replayed, starting from a placeholder for
/// the unknown content at that version. On error neither the graph nor the
/// document is modified.
pub fn merge_new(
    graph: &mut EventGraph,
    current: &Frontier,
    doc: &mut Document,
    new_events: Vec<Event>,
) -> Result<MergeOutput, ReplayError> {
    graph.check_frontier(current)?;
    let mark = graph.mark();
    let touched = graph.add_batch(new_events)?;
    let result = transform_new(graph, current, &touched, doc.len());
    match result {
        Ok((ops, version, counters)) => {
            doc.apply_all(&ops).expect("ops were checked against the document length");
            let doc_length = doc.len();
            Ok(MergeOutput { ops, checkpoint: Checkpoint { version, doc_length }, counters })
        }
        Err(e) => {
            graph.rollback(mark);
            Err(e)
        }
    }
}

fn transform_new(
    graph: &EventGraph,
    current: &Frontier,
    touched: &[LocalIdx],
    doc_len: usize,
) -> Result<(Vec<TransformedOp>, Frontier, Counters), ReplayError> {
    let touched_set: HashSet<LocalIdx> = touched.iter().copied().collect();
    let mut candidates: Vec<LocalIdx> = current.iter().collect();
    candidates.extend(touched.iter().copied().filter(|&t| !graph.children(t).iter().any(|c| touched_set.contains(c))));
    let target = graph.reduce(&candidates);
    let mut counters = Counters::default();
    if &target == current {
        return Ok((Vec::new(), target, counters));
    }

    // Walk down from both versions until a single event (or the root) remains
    // that everything visited descends from; the flag marks events that are
    // already part of `current`.
    let mut queue: BinaryHeap<(isize, bool)> = BinaryHeap::new();
    for c in current.iter() {
        queue.push((c as isize, true));
    }
    for t in target.iter().filter(|&t| !current.contains(t)) {
        queue.push((t as isize, false));
    }
    let mut silent = Vec::new();
    let mut fresh = Vec::new();
    let base = loop {
        let (idx, mut known) = queue.pop().expect("walk ends at the root");
        while let Some(&(next, k)) = queue.peek() {
            if next != idx {
                break;
            }
            queue.pop();
            known |= k;
        }
        if idx < 0 {
            break Frontier::root();
        }
        let idx = idx as LocalIdx;
        if known && queue.is_empty() {
            break Frontier::single(idx);
        }
        if known {
            silent.push(idx);
        } else {
            fresh.push(idx);
        }
        let parents = graph.parents(idx);
        if parents.is_empty() {
            queue.push((-1, known));
        }
        for &p in parents {
            queue.push((p as isize, known));
        }
    };
    silent.reverse();
    fresh.reverse();
    let fresh = graph.sort_subset(&fresh);

    let mut running = current.clone();
    let linear = fresh.iter().all(|&e| {
        let follows = graph.parents(e) == running.as_slice();
        running = Frontier::single(e);
        follows
    });

    let mut ops = Vec::with_capacity(fresh.len());
    let mut len = doc_len;
    if linear {
        for &e in &fresh {
            let op = emit_as_is(graph, e, len)?;
            len = len.wrapping_add_signed(op.length_change());
            ops.push(op);
            counters.fast_path += 1;
        }
        return Ok((ops, target, counters));
    }

    let mut state = MergeState::unbounded_at(graph, base);
    for e in graph.sort_subset(&silent) {
        state.set_prepare_version(graph.parents(e))?;
        state.apply(e)?;
    }
    for &e in &fresh {
        state.set_prepare_version(graph.parents(e))?;
        let op = state.apply(e)?;
        let fits = match op {
            TransformedOp::Insert { pos, .. } => pos <= len,
            TransformedOp::Delete { pos, .. } => pos < len,
            TransformedOp::Noop { .. } => true,
        };
        if !fits {
            let pos = graph.op(e).pos();
            return Err(StateError::IndexOutOfRange { event: e, pos, len }.into());
        }
        len = len.wrapping_add_signed(op.length_change());
        ops.push(op);
    }
    counters.absorb(&state.counters());
    Ok((ops, target, counters))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::causal_graph::EventId;
    use crate::causal_graph::Operation::{Delete, Insert};
    use TransformedOp as T;

    /// "hi" edited concurrently into "Hi" and "hey", then merged to "Hey!".
    pub(crate) fn hey_graph() -> EventGraph {
        let mut g = EventGraph::new();
        g.push("A", &[], Insert { pos: 0, content: 'h' }).unwrap();
        g.push("A", &[0], Insert { pos: 1, content: 'i' }).unwrap();
        g.push("A", &[1], Insert { pos: 0, content: 'H' }).unwrap();
        g.push("A", &[2], Delete { pos: 1 }).unwrap();
        g.push("B", &[1], Delete { pos: 1 }).unwrap();
        g.push("B", &[4], Insert { pos: 1, content: 'e' }).unwrap();
        g.push("B", &[5], Insert { pos: 2, content: 'y' }).unwrap();
        g.push("A", &[3, 6], Insert { pos: 3, content: '!' }).unwrap();
        g
    }

    fn text(ops: &[TransformedOp]) -> String {
        let mut d = Document::new();
        d.apply_all(ops).unwrap();
        d.to_string()
    }

    #[test]
    fn hey_transformed_ops() {
        let g = hey_graph();
        let order: Vec<_> = (0..8).collect();
        let ops = replay_with(&g, ReplayOptions::default(), Some(&order)).unwrap().ops;
        let expected = vec![
            T::Insert { pos: 0, content: 'h', source: 0 },
            T::Insert { pos: 1, content: 'i', source: 1 },
            T::Insert { pos: 0, content: 'H', source: 2 },
            T::Delete { pos: 1, source: 3 },
            T::Delete { pos: 1, source: 4 },
            T::Insert { pos: 1, content: 'e', source: 5 },
            T::Insert { pos: 2, content: 'y', source: 6 },
            T::Insert { pos: 3, content: '!', source: 7 },
        ];
        assert_eq!(ops, expected);
        assert_eq!(text(&ops), "Hey!");
    }

    #[test]
    fn helo_converges_either_way() {
        let g = crate::causal_graph::tests::helo_graph();
        let a = replay_with(&g, ReplayOptions::default(), Some(&[0, 1, 2, 3, 4, 5])).unwrap().ops;
        assert_eq!(a[5], T::Insert { pos: 5, content: '!', source: 5 });
        let b = replay_with(&g, ReplayOptions::default(), Some(&[0, 1, 2, 3, 5, 4])).unwrap().ops;
        assert_eq!(b[4], T::Insert { pos: 4, content: '!', source: 5 });
        assert_eq!(b[5], T::Insert { pos: 3, content: 'l', source: 4 });
        assert_eq!(text(&a), "Hello!");
        assert_eq!(text(&b), "Hello!");
    }

    #[test]
    fn empty_graph_replays_to_nothing() {
        assert!(replay_all(&EventGraph::new()).unwrap().is_empty());
    }

    #[test]
    fn bad_custom_order_is_rejected() {
        let g = hey_graph();
        let err = replay_with(&g, ReplayOptions::default(), Some(&[1, 0, 2, 3, 4, 5, 6, 7])).unwrap_err();
        assert_eq!(err, ReplayError::Graph(GraphError::NotTopological));
    }

    #[test]
    fn checkouts_of_the_hey_graph() {
        let g = hey_graph();
        assert_eq!(checkout(&g, &Frontier::single(3)).unwrap().to_string(), "Hi");
        assert_eq!(checkout(&g, &Frontier::single(6)).unwrap().to_string(), "hey");
        assert_eq!(checkout(&g, g.version()).unwrap().to_string(), "Hey!");
        assert_eq!(checkout(&g, &Frontier::root()).unwrap().to_string(), "");
        assert!(checkout(&g, &Frontier::single(42)).is_err());
    }

    #[test]
    fn linear_graph_costs_no_retreats() {
        let mut g = EventGraph::new();
        for i in 0..100usize {
            let parents: Vec<_> = i.checked_sub(1).into_iter().collect();
            g.push("A", &parents, Insert { pos: i, content: 'x' }).unwrap();
        }
        let c = replay_with(&g, ReplayOptions { clear: false, fast_path: false }, None).unwrap().counters;
        assert_eq!((c.applies, c.retreats, c.advances), (100, 0, 0));
        let c = replay_cost_profile(&g).unwrap();
        assert_eq!(c.fast_path, 100);
    }

    #[test]
    fn fast_path_and_clearing_do_not_change_ops() {
        let g = hey_graph();
        let a = replay_with(&g, ReplayOptions { clear: false, fast_path: false }, None).unwrap().ops;
        let b = replay_with(&g, ReplayOptions { clear: true, fast_path: false }, None).unwrap().ops;
        let c = replay_all(&g).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn out_of_range_event_fails_replay() {
        let mut g = EventGraph::new();
        g.push("A", &[], Insert { pos: 0, content: 'x' }).unwrap();
        g.push("A", &[0], Delete { pos: 1 }).unwrap();
        assert!(matches!(replay_all(&g), Err(ReplayError::State(StateError::IndexOutOfRange { .. }))));
        let no_clear = replay_with(&g, ReplayOptions { clear: false, fast_path: false }, None);
        assert!(matches!(no_clear, Err(ReplayError::State(StateError::IndexOutOfRange { .. }))));
    }

    #[test]
    fn merge_of_a_concurrent_insert() {
        let full = crate::causal_graph::tests::helo_graph();
        let mut g = EventGraph::new();
        for i in 0..5 {
            g.add_event(full.event(i)).unwrap();
        }
        let mut doc = replay_document(&g).unwrap();
        assert_eq!(doc.to_string(), "Hello");
        let current = g.version().clone();
        let out = merge_new(&mut g, &current, &mut doc, vec![full.event(5)]).unwrap();
        assert_eq!(out.ops, vec![T::Insert { pos: 5, content: '!', source: 5 }]);
        assert_eq!(doc.to_string(), "Hello!");
        assert_eq!(out.checkpoint.version, Frontier::new([4, 5]));
    }

    #[test]
    fn merge_of_a_following_event_is_emitted_unchanged() {
        let mut g = EventGraph::new();
        g.push("A", &[], Insert { pos: 0, content: 'a' }).unwrap();
        let mut doc = Document::from("a");
        let ev = Event::new(EventId::new("B", 0), vec![EventId::new("A", 0)], Insert { pos: 0, content: 'b' });
        let out = merge_new(&mut g, &Frontier::single(0), &mut doc, vec![ev]).unwrap();
        assert_eq!(out.ops, vec![T::Insert { pos: 0, content: 'b', source: 1 }]);
        assert_eq!(out.counters.applies, 0);
        assert_eq!(doc.to_string(), "ba");
    }

    #[test]
    fn merge_is_atomic_on_error() {
        let mut g = hey_graph();
        let mut doc = replay_document(&g).unwrap();
        let v = g.version().clone();
        let missing = Event::new(EventId::new("C", 0), vec![EventId::new("Z", 0)], Insert { pos: 0, content: 'x' });
        let ok = Event::new(EventId::new("C", 1), vec![EventId::new("A", 4)], Insert { pos: 0, content: 'y' });
        let err = merge_new(&mut g, &v, &mut doc, vec![ok.clone(), missing]).unwrap_err();
        assert!(matches!(err, ReplayError::Graph(GraphError::MissingParent { .. })));
        assert_eq!(g.len(), 8);
        let bad = Event::new(EventId::new("C", 0), vec![EventId::new("A", 4)], Insert { pos: 9, content: 'x' });
        assert!(merge_new(&mut g, &v, &mut doc, vec![bad]).is_err());
        assert_eq!(g.len(), 8);
        assert_eq!(doc.to_string(), "Hey!");
    }

    #[test]
    fn merge_handles_out_of_order_batches_and_duplicates() {
        let full = hey_graph();
        let mut g = EventGraph::new();
        for i in 0..4 {
            g.add_event(full.event(i)).unwrap();
        }
        let mut doc = replay_document(&g).unwrap();
        let v = g.version().clone();
        let batch: Vec<Event> = [7, 6, 5, 4, 3].iter().map(|&i| full.event(i)).collect();
        merge_new(&mut g, &v, &mut doc, batch).unwrap();
        assert_eq!(doc.to_string(), "Hey!");
    }
}
