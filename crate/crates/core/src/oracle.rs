//! Slow, independent reference implementations used to check the engine.
//!
//! [`NaiveList`] is a flat-vector list CRDT. [`oracle_replay`] runs one
//! simulated replica per branch that turns index-based ops into id-based ones,
//! and a receiver replica that integrates all of them. The insertion ordering
//! rule is re-implemented here from scratch on array indexes; nothing is
//! shared with the engine except the author order of the graph.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::causal_graph::{EventGraph, Frontier, LocalIdx, Operation};
use crate::internal_state::{EffectState, PrepareState};
use crate::replay::{self, ReplayError, ReplayOptions, TransformedOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Item {
    pub id: LocalIdx,
    pub ch: char,
    pub deleted: bool,
    pub origin_left: Option<LocalIdx>,
    pub origin_right: Option<LocalIdx>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdOp {
    Insert { id: LocalIdx, ch: char, origin_left: Option<LocalIdx>, origin_right: Option<LocalIdx> },
    Delete { target: LocalIdx },
}

#[derive(Clone, Debug, Default)]
pub struct NaiveList {
    items: Vec<Item>,
}

impl NaiveList {
    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn visible_len(&self) -> usize {
        self.items.iter().filter(|i| !i.deleted).count()
    }

    pub fn text(&self) -> String {
        self.items.iter().filter(|i| !i.deleted).map(|i| i.ch).collect()
    }

    fn index_of(&self, id: LocalIdx) -> usize {
        self.items.iter().position(|i| i.id == id).expect("referenced item is present")
    }

    fn nth_visible(&self, n: usize) -> Option<usize> {
        self.items.iter().enumerate().filter(|(_, i)| !i.deleted).nth(n).map(|(k, _)| k)
    }

    /// Translates an index-based op from this replica's point of view.
    pub fn local_op(&self, id: LocalIdx, op: Operation) -> Option<IdOp> {
        match op {
            Operation::Insert { pos, content } => {
                let at = if pos == 0 { 0 } else { self.nth_visible(pos - 1)? + 1 };
                Some(IdOp::Insert {
                    id,
                    ch: content,
                    origin_left: at.checked_sub(1).map(|k| self.items[k].id),
                    origin_right: self.items.get(at).map(|i| i.id),
                })
            }
            Operation::Delete { pos } => Some(IdOp::Delete { target: self.items[self.nth_visible(pos)?].id }),
        }
    }

    pub fn apply(&mut self, op: IdOp, graph: &EventGraph) {
        match op {
            IdOp::Delete { target } => {
                let k = self.index_of(target);
                self.items[k].deleted = true;
            }
            IdOp::Insert { id, ch, origin_left, origin_right } => {
                let item = Item { id, ch, deleted: false, origin_left, origin_right };
                let at = self.integrate_position(&item, graph);
                self.items.insert(at, item);
            }
        }
    }

    fn integrate_position(&self, item: &Item, graph: &EventGraph) -> usize {
        let len = self.items.len() as isize;
        let pos_of = |id: Option<LocalIdx>, none: isize| id.map_or(none, |id| self.index_of(id) as isize);
        let left = pos_of(item.origin_left, -1);
        let right = pos_of(item.origin_right, len);
        let mut dest = left + 1;
        let mut scanning = false;
        let mut i = left + 1;
        loop {
            if !scanning {
                dest = i;
            }
            if i == len || i == right {
                break;
            }
            let other = &self.items[i as usize];
            let oleft = pos_of(other.origin_left, -1);
            let oright = pos_of(other.origin_right, len);
            if oleft < left
                || (oleft == left && oright == right && graph.cmp_authors(item.id, other.id) == Ordering::Less)
            {
                break;
            }
            if oleft == left {
                scanning = oright < right;
            }
            i += 1;
        }
        dest as usize
    }
}

/// Transitive ancestry, each event including itself, as bitsets.
pub struct Ancestry {
    words: usize,
    bits: Vec<u64>,
}

impl Ancestry {
    pub fn new(graph: &EventGraph) -> Self {
        let n = graph.len();
        let words = n.div_ceil(64).max(1);
        let mut bits = vec![0u64; n * words];
        for e in 0..n {
            for &p in graph.parents(e) {
                for w in 0..words {
                    bits[e * words + w] |= bits[p * words + w];
                }
            }
            bits[e * words + e / 64] |= 1 << (e % 64);
        }
        Ancestry { words, bits }
    }

    /// `a` is `b` or happened before it.
    pub fn reaches(&self, a: LocalIdx, b: LocalIdx) -> bool {
        self.bits[b * self.words + a / 64] & (1 << (a % 64)) != 0
    }

    pub fn concurrent(&self, a: LocalIdx, b: LocalIdx) -> bool {
        !self.reaches(a, b) && !self.reaches(b, a)
    }

    /// Membership flags of `Events(v)`.
    pub fn events_of(&self, n: usize, v: &[LocalIdx]) -> Vec<bool> {
        (0..n).map(|x| v.iter().any(|&f| self.reaches(x, f))).collect()
    }
}

/// Whether `v` is critical, straight from the definition.
pub fn brute_is_critical(graph: &EventGraph, anc: &Ancestry, v: &Frontier) -> bool {
    let inside = anc.events_of(graph.len(), v.as_slice());
    (0..graph.len()).all(|x| inside[x] || v.iter().all(|f| f != x && anc.reaches(f, x)))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("event {0} uses an index that does not exist at its parent version")]
    InvalidIndex(LocalIdx),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleRun {
    pub text: String,
    /// Every inserted character in final list order, deleted ones included.
    pub order: Vec<LocalIdx>,
}

struct Replica {
    list: NaiveList,
    known: Vec<bool>,
    known_count: usize,
}

/// Document produced by a network of simulated list-CRDT replicas.
pub fn oracle_replay(graph: &EventGraph) -> Result<OracleRun, OracleError> {
    let n = graph.len();
    let anc = Ancestry::new(graph);
    let mut id_ops: Vec<IdOp> = Vec::with_capacity(n);
    let mut replicas: Vec<Replica> = Vec::new();

    for e in 0..n {
        let need = anc.events_of(n, graph.parents(e));
        let pick = replicas
            .iter()
            .enumerate()
            .filter(|(_, r)| (0..e).all(|x| !r.known[x] || need[x]))
            .max_by_key(|(_, r)| r.known_count)
            .map(|(k, _)| k);
        let k = pick.unwrap_or_else(|| {
            replicas.push(Replica { list: NaiveList::default(), known: vec![false; n], known_count: 0 });
            replicas.len() - 1
        });
        let r = &mut replicas[k];
        for x in 0..e {
            if need[x] && !r.known[x] {
                r.list.apply(id_ops[x], graph);
                r.known[x] = true;
                r.known_count += 1;
            }
        }
        let op = r.list.local_op(e, graph.op(e)).ok_or(OracleError::InvalidIndex(e))?;
        r.list.apply(op, graph);
        r.known[e] = true;
        r.known_count += 1;
        id_ops.push(op);
    }

    let mut receiver = NaiveList::default();
    for &op in &id_ops {
        receiver.apply(op, graph);
    }
    Ok(OracleRun { text: receiver.text(), order: receiver.items().iter().map(|i| i.id).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FuzzConfig {
    pub max_events: usize,
    pub agents: usize,
    /// Probability that an agent edits without first catching up with everyone.
    pub concurrency: f64,
    pub delete_ratio: f64,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig { max_events: 200, agents: 4, concurrency: 0.3, delete_ratio: 0.3 }
    }
}

const ALPHABET: &[char] = &['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'x', 'y', 'z', ' ', 'é', 'ß', '日', '😀'];

struct Author {
    name: String,
    list: NaiveList,
    known: Vec<bool>,
    frontier: Frontier,
    cursor: Option<usize>,
}

impl Author {
    fn learn(&mut self, graph: &EventGraph, id_ops: &[IdOp], wanted: impl Fn(LocalIdx) -> bool) {
        self.known.resize(graph.len(), false);
        for (x, &op) in id_ops.iter().enumerate().take(graph.len()) {
            if !self.known[x] && wanted(x) {
                self.list.apply(op, graph);
                self.known[x] = true;
            }
        }
        self.cursor = None;
    }
}

/// A random valid event graph, fully determined by `seed`.
pub fn generate(seed: u64, config: &FuzzConfig) -> EventGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = EventGraph::new();
    let mut id_ops: Vec<IdOp> = Vec::new();
    let mut authors: Vec<Author> = (0..config.agents.max(1))
        .map(|a| Author {
            name: ((b'A' + a as u8) as char).to_string(),
            list: NaiveList::default(),
            known: Vec::new(),
            frontier: Frontier::root(),
            cursor: None,
        })
        .collect();
    let n = rng.gen_range(1..=config.max_events.max(1));

    for _ in 0..n {
        let a = rng.gen_range(0..authors.len());
        if !rng.gen_bool(config.concurrency) {
            if authors[a].frontier != *graph.version() {
                authors[a].learn(&graph, &id_ops, |_| true);
                authors[a].frontier = graph.version().clone();
            }
        } else if rng.gen_bool(0.3) && authors.len() > 1 {
            let b = (a + rng.gen_range(1..authors.len())) % authors.len();
            let theirs: Vec<bool> = authors[b].known.clone();
            let mut joined: Vec<LocalIdx> = authors[a].frontier.iter().collect();
            joined.extend(authors[b].frontier.iter());
            let merged = graph.reduce(&joined);
            if merged != authors[a].frontier {
                authors[a].learn(&graph, &id_ops, |x| theirs.get(x).copied().unwrap_or(false));
                authors[a].frontier = merged;
            }
        }

        let author = &mut authors[a];
        let visible = author.list.visible_len();
        let op = if visible > 0 && rng.gen_bool(config.delete_ratio) {
            let pos = match author.cursor {
                // Backspacing through what was just typed.
                Some(c) if c > 0 && c <= visible && rng.gen_bool(0.5) => c - 1,
                _ => rng.gen_range(0..visible),
            };
            author.cursor = Some(pos);
            Operation::Delete { pos }
        } else {
            let pos = match author.cursor {
                Some(c) if c <= visible && rng.gen_bool(0.7) => c,
                _ => rng.gen_range(0..=visible),
            };
            author.cursor = Some(pos + 1);
            Operation::Insert { pos, content: *ALPHABET.choose(&mut rng).expect("non-empty") }
        };
        let parents: Vec<LocalIdx> = author.frontier.iter().collect();
        let idx = graph.push(&author.name, &parents, op).expect("generated events are valid");
        let id_op = author.list.local_op(idx, op).expect("index chosen within the document");
        author.list.apply(id_op, &graph);
        author.known.resize(graph.len(), false);
        author.known[idx] = true;
        author.frontier = Frontier::single(idx);
        id_ops.push(id_op);
    }
    graph
}

/// Applies transformed ops to a list that remembers which event inserted
/// each character.
pub fn apply_with_ids(ops: &[TransformedOp]) -> Vec<(LocalIdx, char)> {
    let mut doc = Vec::new();
    for op in ops {
        match *op {
            TransformedOp::Insert { pos, content, source } => doc.insert(pos, (source, content)),
            TransformedOp::Delete { pos, .. } => {
                doc.remove(pos);
            }
            TransformedOp::Noop { .. } => {}
        }
    }
    doc
}

pub fn checkout_ids(graph: &EventGraph, v: &Frontier) -> Result<Vec<(LocalIdx, char)>, ReplayError> {
    Ok(apply_with_ids(&replay::checkout_ops(graph, v)?))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ListViolation {
    #[error("replay failed: {0}")]
    Engine(#[from] ReplayError),
    #[error("final document holds {actual:?} but inserted-minus-deleted is {expected:?}")]
    WrongContent { expected: Vec<(LocalIdx, char)>, actual: Vec<(LocalIdx, char)> },
    #[error("document after event {event} orders {first} before {second}, against the list order")]
    OrderBroken { event: LocalIdx, first: LocalIdx, second: LocalIdx },
    #[error("event {event} inserted {expected:?} at {pos}, but its document has {found:?} there")]
    Misplaced { event: LocalIdx, pos: usize, expected: char, found: Option<(LocalIdx, char)> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StrongListReport {
    pub events_checked: usize,
}

/// Checks strong list ordering. Every event's document is examined
/// when the graph has at most `full_limit` events; otherwise an evenly spread
/// sample of `full_limit` events is used.
pub fn check_strong_list(graph: &EventGraph, full_limit: usize) -> Result<StrongListReport, ListViolation> {
    let n = graph.len();
    let mut deleted = vec![false; n];
    let mut parent_docs: HashMap<Frontier, Vec<(LocalIdx, char)>> = HashMap::new();
    for b in 0..n {
        if let Operation::Delete { pos } = graph.op(b) {
            let v = Frontier::from(graph.parents(b));
            if !parent_docs.contains_key(&v) {
                let doc = checkout_ids(graph, &v)?;
                parent_docs.insert(v.clone(), doc);
            }
            let doc = &parent_docs[&v];
            let (target, _) = doc.get(pos).copied().ok_or(ReplayError::State(
                crate::internal_state::StateError::IndexOutOfRange { event: b, pos, len: doc.len() },
            ))?;
            deleted[target] = true;
        }
    }
    let mut expected: Vec<(LocalIdx, char)> = (0..n)
        .filter_map(|e| match graph.op(e) {
            Operation::Insert { content, .. } if !deleted[e] => Some((e, content)),
            _ => None,
        })
        .collect();
    let final_doc = checkout_ids(graph, graph.version())?;
    let mut actual = final_doc.clone();
    actual.sort_unstable();
    expected.sort_unstable();
    if actual != expected {
        return Err(ListViolation::WrongContent { expected, actual });
    }

    let (_, state) = replay::replay_state(graph, None)?;
    let mut rank = vec![usize::MAX; n];
    for (r, (id, _, _)) in state.char_states().into_iter().enumerate() {
        rank[id] = r;
    }
    drop(state);

    let events: Vec<LocalIdx> = if n <= full_limit {
        (0..n).collect()
    } else {
        let mut sample: Vec<LocalIdx> = (0..full_limit).map(|k| k * n / full_limit).collect();
        sample.push(n - 1);
        sample.dedup();
        sample
    };
    for &e in &events {
        let doc = checkout_ids(graph, &Frontier::single(e))?;
        for w in doc.windows(2) {
            if rank[w[0].0] >= rank[w[1].0] {
                return Err(ListViolation::OrderBroken { event: e, first: w[0].0, second: w[1].0 });
            }
        }
        if let Operation::Insert { pos, content } = graph.op(e) {
            let found = doc.get(pos).copied();
            if found != Some((e, content)) {
                return Err(ListViolation::Misplaced { event: e, pos, expected: content, found });
            }
        }
    }
    Ok(StrongListReport { events_checked: events.len() })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CommutationViolation {
    #[error("replay failed: {0}")]
    Engine(#[from] ReplayError),
    #[error("swapping concurrent events {0} and {1} changed the result")]
    Diverged(LocalIdx, LocalIdx),
}

type StateSnapshot = (Vec<(usize, PrepareState, EffectState)>, String);

fn snapshot(graph: &EventGraph, order: &[LocalIdx]) -> Result<StateSnapshot, ReplayError> {
    let (ops, mut state) = replay::replay_state(graph, Some(order))?;
    state.set_prepare_version(graph.version().as_slice())?;
    let text: String = apply_with_ids(&ops).into_iter().map(|(_, c)| c).collect();
    Ok((state.char_states(), text))
}

/// Swaps each adjacent concurrent pair of the default order and checks the
/// final state and document do not change. Returns the number of swaps tried.
pub fn check_commutation(graph: &EventGraph) -> Result<usize, CommutationViolation> {
    let base = graph.sort_topological(&Frontier::root(), graph.version()).map_err(ReplayError::from)?;
    let expected = snapshot(graph, &base)?;
    let anc = Ancestry::new(graph);
    let mut swaps = 0;
    for k in 0..base.len().saturating_sub(1) {
        let (a, b) = (base[k], base[k + 1]);
        if !anc.concurrent(a, b) {
            continue;
        }
        let mut order = base.clone();
        order.swap(k, k + 1);
        if snapshot(graph, &order)? != expected {
            return Err(CommutationViolation::Diverged(a, b));
        }
        swaps += 1;
    }
    Ok(swaps)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FuzzFailure {
    #[error("replay failed: {0}")]
    Engine(#[from] ReplayError),
    #[error("{0}")]
    Oracle(#[from] OracleError),
    #[error("random order #{order} produced {got:?}, default order produced {expected:?}")]
    OrderDependent { order: usize, expected: String, got: String },
    #[error("engine produced {engine:?}, oracle produced {oracle:?}")]
    OracleMismatch { engine: String, oracle: String },
    #[error("clearing changed the output")]
    ClearingChangedOutput,
    #[error("{0}")]
    StrongList(#[from] ListViolation),
    #[error("{0}")]
    Commutation(#[from] CommutationViolation),
}

/// Which checks [`check_graph`] runs.
#[derive(Clone, Copy, Debug)]
pub struct Checks {
    pub random_orders: usize,
    pub oracle: bool,
    pub strong_list: bool,
    pub commutation: bool,
}

impl Default for Checks {
    fn default() -> Self {
        Checks { random_orders: 10, oracle: true, strong_list: true, commutation: true }
    }
}

/// Runs the differential checks on one graph. `seed` drives the random orders.
pub fn check_graph(graph: &EventGraph, seed: u64, checks: Checks) -> Result<(), FuzzFailure> {
    let ops = replay::replay_all(graph)?;
    let text: String = apply_with_ids(&ops).into_iter().map(|(_, c)| c).collect();
    let unoptimized = replay::replay_with(graph, ReplayOptions { clear: false, fast_path: false }, None)?;
    if unoptimized.ops != ops {
        return Err(FuzzFailure::ClearingChangedOutput);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for k in 0..checks.random_orders {
        let order = graph.random_topological_order(&mut rng);
        let got_ops = replay::replay_with(graph, ReplayOptions::default(), Some(&order))?.ops;
        let got: String = apply_with_ids(&got_ops).into_iter().map(|(_, c)| c).collect();
        if got != text {
            return Err(FuzzFailure::OrderDependent { order: k, expected: text, got });
        }
    }
    if checks.oracle {
        let oracle = oracle_replay(graph)?;
        if oracle.text != text {
            return Err(FuzzFailure::OracleMismatch { engine: text, oracle: oracle.text });
        }
    }
    if checks.strong_list {
        check_strong_list(graph, 50)?;
    }
    if checks.commutation {
        check_commutation(graph)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn helo_oracle() {
        let g = crate::causal_graph::tests::helo_graph();
        assert_eq!(oracle_replay(&g).unwrap().text, "Hello!");
    }

    #[test]
    fn linear_oracle_is_inserts_minus_deletes() {
        let mut g = EventGraph::new();
        g.push("A", &[], Operation::Insert { pos: 0, content: 'a' }).unwrap();
        g.push("A", &[0], Operation::Insert { pos: 1, content: 'b' }).unwrap();
        g.push("A", &[1], Operation::Delete { pos: 0 }).unwrap();
        assert_eq!(oracle_replay(&g).unwrap().text, "b");
    }

    #[test]
    fn generator_is_seed_deterministic() {
        let cfg = FuzzConfig::default();
        let a = generate(7, &cfg);
        let b = generate(7, &cfg);
        assert_eq!(a.len(), b.len());
        assert!((0..a.len()).all(|i| a.event(i) == b.event(i)));
    }

    #[test]
    fn hey_graph_passes_every_check() {
        let g = crate::replay::tests::hey_graph();
        check_graph(&g, 1, Checks::default()).unwrap();
        assert_eq!(check_strong_list(&g, 50).unwrap().events_checked, 8);
    }

    #[test]
    fn out_of_range_graph_is_rejected_by_the_oracle() {
        let mut g = EventGraph::new();
        g.push("A", &[], Operation::Delete { pos: 0 }).unwrap();
        assert_eq!(oracle_replay(&g), Err(OracleError::InvalidIndex(0)));
    }
}
