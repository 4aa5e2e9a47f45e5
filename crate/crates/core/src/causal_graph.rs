//! The immutable event DAG and the causal queries the walker needs: version
//! expansion, diffs between versions, critical versions and the branch-aware
//! topological sort.
//!
//! Events are identified internally by a dense [`LocalIdx`] assigned in
//! arrival order. Because an event is only accepted once all of its parents
//! are present, arrival order is always a valid topological order, and most
//! queries lean on that: a parent always has a smaller index than its child.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

/// Dense per-replica index of an event, in arrival order.
pub type LocalIdx = usize;

/// Globally unique event identifier: replica name plus per-replica sequence number.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventId {
    pub agent: String,
    pub seq: u64,
}

impl EventId {
    pub fn new(agent: impl Into<String>, seq: u64) -> Self {
        EventId { agent: agent.into(), seq }
    }
}

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.agent, self.seq)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed event id {0:?}, expected agent@seq")]
pub struct ParseEventIdError(pub String);

impl FromStr for EventId {
    type Err = ParseEventIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (agent, seq) = s.rsplit_once('@').ok_or_else(|| ParseEventIdError(s.to_string()))?;
        if agent.is_empty() {
            return Err(ParseEventIdError(s.to_string()));
        }
        let seq = seq.parse().map_err(|_| ParseEventIdError(s.to_string()))?;
        Ok(EventId::new(agent, seq))
    }
}

/// A single-character edit, with indexes counted in Unicode scalar values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operation {
    Insert { pos: usize, content: char },
    Delete { pos: usize },
}

impl Operation {
    pub fn pos(&self) -> usize {
        match *self {
            Operation::Insert { pos, .. } | Operation::Delete { pos } => pos,
        }
    }

    pub fn is_insert(&self) -> bool {
        matches!(self, Operation::Insert { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub id: EventId,
    pub parents: Vec<EventId>,
    pub op: Operation,
}

impl Event {
    pub fn new(id: EventId, parents: Vec<EventId>, op: Operation) -> Self {
        Event { id, parents, op }
    }
}

/// A version: the set of events with no children among some downward-closed
/// set of events. Stored sorted by [`LocalIdx`]. The empty frontier is the root
/// version (empty document).
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Frontier(SmallVec<[LocalIdx; 2]>);

impl Frontier {
    pub fn root() -> Self {
        Frontier(SmallVec::new())
    }

    /// Builds a frontier from arbitrary indexes, sorting and deduplicating.
    /// The caller is responsible for the elements being mutually concurrent;
    /// use [`EventGraph::reduce`] otherwise.
    pub fn new(ids: impl IntoIterator<Item = LocalIdx>) -> Self {
        let mut v: SmallVec<[LocalIdx; 2]> = ids.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Frontier(v)
    }

    pub fn single(idx: LocalIdx) -> Self {
        let mut v = SmallVec::new();
        v.push(idx);
        Frontier(v)
    }

    pub fn as_slice(&self) -> &[LocalIdx] {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, idx: LocalIdx) -> bool {
        self.0.binary_search(&idx).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = LocalIdx> + '_ {
        self.0.iter().copied()
    }

    /// Moves the frontier past `idx`, whose parents must all be contained in
    /// the (downward-closed) set this frontier describes.
    pub fn advance(&mut self, parents: &[LocalIdx], idx: LocalIdx) {
        self.0.retain(|e| !parents.contains(e));
        match self.0.binary_search(&idx) {
            Ok(_) => {}
            Err(at) => self.0.insert(at, idx),
        }
    }
}

impl From<LocalIdx> for Frontier {
    fn from(idx: LocalIdx) -> Self {
        Frontier::single(idx)
    }
}

impl From<&[LocalIdx]> for Frontier {
    fn from(ids: &[LocalIdx]) -> Self {
        Frontier::new(ids.iter().copied())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("event {event} references unknown parent {parent}")]
    MissingParent { event: EventId, parent: EventId },
    #[error("duplicate event id {0}")]
    DuplicateId(EventId),
    #[error("event {0} lists itself as a parent")]
    SelfParent(EventId),
    #[error("parents of {0} are not mutually concurrent")]
    RedundantParent(EventId),
    #[error("unknown event {0}")]
    UnknownId(String),
    #[error("version is not contained in the target version")]
    NotAncestor,
    #[error("order is not a topological order of the requested events")]
    NotTopological,
}

#[derive(Clone, Debug)]
struct Entry {
    agent: u32,
    seq: u64,
    parents: SmallVec<[LocalIdx; 2]>,
    op: Operation,
}

pub(crate) struct GraphMark {
    len: usize,
    agents: usize,
    next_seq: Vec<u64>,
    version: Frontier,
}

/// Append-only event DAG.
#[derive(Clone, Debug, Default)]
pub struct EventGraph {
    agents: Vec<String>,
    agent_lookup: HashMap<String, u32>,
    entries: Vec<Entry>,
    children: Vec<SmallVec<[LocalIdx; 2]>>,
    by_id: HashMap<(u32, u64), LocalIdx>,
    next_seq: Vec<u64>,
    version: Frontier,
}

impl EventGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The frontier of the whole graph.
    pub fn version(&self) -> &Frontier {
        &self.version
    }

    /// Adds an event whose parents are all already present.
    pub fn add_event(&mut self, event: Event) -> Result<LocalIdx, GraphError> {
        if event.parents.contains(&event.id) {
            return Err(GraphError::SelfParent(event.id));
        }
        if self.idx_of(&event.id).is_some() {
            return Err(GraphError::DuplicateId(event.id));
        }
        let mut parents = SmallVec::<[LocalIdx; 2]>::with_capacity(event.parents.len());
        for p in &event.parents {
            match self.idx_of(p) {
                Some(idx) => parents.push(idx),
                None => return Err(GraphError::MissingParent { event: event.id.clone(), parent: p.clone() }),
            }
        }
        let agent = self.intern_agent(&event.id.agent);
        self.insert(agent, event.id.seq, parents, event.op).map_err(|e| e.with_id(&event.id))
    }

    /// Adds an event authored by `agent` with the next unused sequence number
    /// for that agent.
    pub fn push(&mut self, agent: &str, parents: &[LocalIdx], op: Operation) -> Result<LocalIdx, GraphError> {
        let agent_idx = self.intern_agent(agent);
        let seq = self.next_seq[agent_idx as usize];
        let id = EventId::new(agent, seq);
        if let Some(&p) = parents.iter().find(|&&p| p >= self.len()) {
            return Err(GraphError::UnknownId(p.to_string()));
        }
        self.insert(agent_idx, seq, parents.iter().copied().collect(), op).map_err(|e| e.with_id(&id))
    }

    /// Adds an event with an explicit sequence number and parents given as
    /// local indexes.
    pub(crate) fn push_with_seq(
        &mut self,
        agent: &str,
        seq: u64,
        parents: &[LocalIdx],
        op: Operation,
    ) -> Result<LocalIdx, GraphError> {
        let id = EventId::new(agent, seq);
        if let Some(&p) = parents.iter().find(|&&p| p >= self.len()) {
            return Err(GraphError::UnknownId(p.to_string()));
        }
        let agent_idx = self.intern_agent(agent);
        self.insert(agent_idx, seq, parents.iter().copied().collect(), op).map_err(|e| e.with_id(&id))
    }

    fn insert(
        &mut self,
        agent: u32,
        seq: u64,
        mut parents: SmallVec<[LocalIdx; 2]>,
        op: Operation,
    ) -> Result<LocalIdx, GraphError> {
        if self.by_id.contains_key(&(agent, seq)) {
            return Err(GraphError::DuplicateId(EventId::new(self.agents[agent as usize].clone(), seq)));
        }
        parents.sort_unstable();
        let before = parents.len();
        parents.dedup();
        if parents.len() != before {
            return Err(GraphError::RedundantParent(EventId::new("", 0)));
        }
        for (i, &p) in parents.iter().enumerate() {
            if parents[i + 1..].iter().any(|&q| self.happened_before(p, q)) {
                return Err(GraphError::RedundantParent(EventId::new("", 0)));
            }
        }

        let idx = self.entries.len();
        for &p in &parents {
            self.children[p].push(idx);
        }
        self.version.advance(&parents, idx);
        self.entries.push(Entry { agent, seq, parents, op });
        self.children.push(SmallVec::new());
        self.by_id.insert((agent, seq), idx);
        let next = &mut self.next_seq[agent as usize];
        *next = (*next).max(seq + 1);
        Ok(idx)
    }

    /// Adds a batch of events given in any causal arrangement, buffering those
    /// whose parents arrive later in the batch. Events already in the graph are
    /// skipped. Returns the index of every event in the batch; on error the graph
    /// is left as it was.
    pub fn add_batch(&mut self, events: Vec<Event>) -> Result<Vec<LocalIdx>, GraphError> {
        let mark = self.mark();
        let result = self.add_batch_inner(events);
        if result.is_err() {
            self.rollback(mark);
        }
        result
    }

    fn add_batch_inner(&mut self, events: Vec<Event>) -> Result<Vec<LocalIdx>, GraphError> {
        let mut out: Vec<Option<LocalIdx>> = vec![None; events.len()];
        let mut waiting: HashMap<EventId, Vec<usize>> = HashMap::new();
        let mut ready: Vec<usize> = (0..events.len()).rev().collect();
        while let Some(j) = ready.pop() {
            let event = &events[j];
            if let Some(idx) = self.idx_of(&event.id) {
                out[j] = Some(idx);
                continue;
            }
            if let Some(missing) = event.parents.iter().find(|p| self.idx_of(p).is_none()) {
                waiting.entry(missing.clone()).or_default().push(j);
                continue;
            }
            out[j] = Some(self.add_event(event.clone())?);
            if let Some(woken) = waiting.remove(&event.id) {
                ready.extend(woken);
            }
        }
        if let Some((parent, js)) = waiting.into_iter().min_by_key(|(_, js)| js.iter().min().copied()) {
            let event = events[js[0]].id.clone();
            return Err(GraphError::MissingParent { event, parent });
        }
        Ok(out.into_iter().map(|o| o.expect("every event resolved")).collect())
    }

    pub(crate) fn mark(&self) -> GraphMark {
        GraphMark {
            len: self.len(),
            agents: self.agents.len(),
            next_seq: self.next_seq.clone(),
            version: self.version.clone(),
        }
    }

    /// Drops every event added since `mark` was taken.
    pub(crate) fn rollback(&mut self, mark: GraphMark) {
        while self.entries.len() > mark.len {
            let idx = self.entries.len() - 1;
            let entry = self.entries.pop().expect("non-empty");
            self.children.pop();
            for &p in &entry.parents {
                let popped = self.children[p].pop();
                debug_assert_eq!(popped, Some(idx));
            }
            self.by_id.remove(&(entry.agent, entry.seq));
        }
        for name in self.agents.drain(mark.agents..) {
            self.agent_lookup.remove(&name);
        }
        self.next_seq = mark.next_seq;
        self.version = mark.version;
    }

    fn intern_agent(&mut self, agent: &str) -> u32 {
        if let Some(&a) = self.agent_lookup.get(agent) {
            return a;
        }
        let a = self.agents.len() as u32;
        self.agents.push(agent.to_string());
        self.agent_lookup.insert(agent.to_string(), a);
        self.next_seq.push(0);
        a
    }

    pub fn idx_of(&self, id: &EventId) -> Option<LocalIdx> {
        let agent = *self.agent_lookup.get(&id.agent)?;
        self.by_id.get(&(agent, id.seq)).copied()
    }

    pub fn id_of(&self, idx: LocalIdx) -> EventId {
        let e = &self.entries[idx];
        EventId::new(self.agents[e.agent as usize].clone(), e.seq)
    }

    pub fn agent_of(&self, idx: LocalIdx) -> &str {
        &self.agents[self.entries[idx].agent as usize]
    }

    pub fn seq_of(&self, idx: LocalIdx) -> u64 {
        self.entries[idx].seq
    }

    /// Agent names in first-seen order.
    pub fn agents(&self) -> &[String] {
        &self.agents
    }

    pub(crate) fn agent_index_of(&self, idx: LocalIdx) -> u32 {
        self.entries[idx].agent
    }

    pub fn op(&self, idx: LocalIdx) -> Operation {
        self.entries[idx].op
    }

    pub fn parents(&self, idx: LocalIdx) -> &[LocalIdx] {
        &self.entries[idx].parents
    }

    pub fn children(&self, idx: LocalIdx) -> &[LocalIdx] {
        &self.children[idx]
    }

    /// Rebuilds the public [`Event`] form of a stored event.
    pub fn event(&self, idx: LocalIdx) -> Event {
        Event {
            id: self.id_of(idx),
            parents: self.parents(idx).iter().map(|&p| self.id_of(p)).collect(),
            op: self.op(idx),
        }
    }

    /// Total order used to break ties between concurrent insertions at the
    /// same position: by agent name, then sequence number.
    pub fn cmp_authors(&self, a: LocalIdx, b: LocalIdx) -> std::cmp::Ordering {
        let (ea, eb) = (&self.entries[a], &self.entries[b]);
        self.agents[ea.agent as usize].cmp(&self.agents[eb.agent as usize]).then(ea.seq.cmp(&eb.seq))
    }

    pub fn check_frontier(&self, v: &Frontier) -> Result<(), GraphError> {
        match v.iter().find(|&i| i >= self.len()) {
            Some(bad) => Err(GraphError::UnknownId(bad.to_string())),
            None => Ok(()),
        }
    }

    /// Resolves event ids into a frontier, dropping any id that is an
    /// ancestor of another.
    pub fn frontier_from_ids(&self, ids: &[EventId]) -> Result<Frontier, GraphError> {
        let idxs = ids
            .iter()
            .map(|id| self.idx_of(id).ok_or_else(|| GraphError::UnknownId(id.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.reduce(&idxs))
    }

    pub fn frontier_ids(&self, v: &Frontier) -> Vec<EventId> {
        v.iter().map(|i| self.id_of(i)).collect()
    }

    /// The frontier of `Events(ids)`.
    pub fn reduce(&self, ids: &[LocalIdx]) -> Frontier {
        let mut sorted: Vec<LocalIdx> = ids.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted.dedup();
        let mut out: Vec<LocalIdx> = Vec::with_capacity(sorted.len());
        for c in sorted {
            if !out.iter().any(|&kept| self.happened_before(c, kept)) {
                out.push(c);
            }
        }
        Frontier::new(out)
    }

    /// `a → b`: there is a directed path from `a` to `b`.
    pub fn happened_before(&self, a: LocalIdx, b: LocalIdx) -> bool {
        if a >= b {
            return false;
        }
        self.reaches(&[b], a)
    }

    /// Whether `target ∈ Events(v)`.
    pub fn version_contains(&self, v: &Frontier, target: LocalIdx) -> bool {
        v.contains(target) || self.reaches(v.as_slice(), target)
    }

    // Walks down from `starts`, never below `target`.
    fn reaches(&self, starts: &[LocalIdx], target: LocalIdx) -> bool {
        let mut queue: BinaryHeap<LocalIdx> = starts.iter().copied().filter(|&s| s > target).collect();
        while let Some(idx) = queue.pop() {
            while queue.peek() == Some(&idx) {
                queue.pop();
            }
            for &p in self.parents(idx) {
                if p == target {
                    return true;
                }
                if p > target {
                    queue.push(p);
                }
            }
        }
        false
    }

    /// `Events(v)`: the version plus all its transitive ancestors, ascending.
    pub fn events_of(&self, v: &Frontier) -> Result<Vec<LocalIdx>, GraphError> {
        self.check_frontier(v)?;
        if v == &self.version {
            return Ok((0..self.len()).collect());
        }
        let mut seen = vec![false; v.iter().max().map_or(0, |m| m + 1)];
        let mut stack: Vec<LocalIdx> = v.iter().collect();
        let mut out = Vec::new();
        while let Some(idx) = stack.pop() {
            if seen[idx] {
                continue;
            }
            seen[idx] = true;
            out.push(idx);
            stack.extend(self.parents(idx).iter().copied().filter(|&p| !seen[p]));
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Set differences `(Events(a) − Events(b), Events(b) − Events(a))`, each
    /// in descending index order (reverse topological). The walk stops as soon
    /// as every queued event is a common ancestor, so the cost tracks the size
    /// of the differing region.
    pub fn diff(&self, a: &Frontier, b: &Frontier) -> Result<(Vec<LocalIdx>, Vec<LocalIdx>), GraphError> {
        self.check_frontier(a)?;
        self.check_frontier(b)?;
        let mut only_a = Vec::new();
        let mut only_b = Vec::new();
        if a == b {
            return Ok((only_a, only_b));
        }

        const A: u8 = 1;
        const B: u8 = 2;
        const SHARED: u8 = A | B;

        let mut queue: BinaryHeap<(LocalIdx, u8)> = BinaryHeap::new();
        let mut unshared = 0usize;
        for i in a.iter() {
            queue.push((i, A));
            unshared += 1;
        }
        for i in b.iter() {
            queue.push((i, B));
            unshared += 1;
        }

        while unshared > 0 {
            let (idx, mut flag) = queue.pop().expect("unshared entries remain queued");
            if flag != SHARED {
                unshared -= 1;
            }
            while let Some(&(next, f)) = queue.peek() {
                if next != idx {
                    break;
                }
                queue.pop();
                if f != SHARED {
                    unshared -= 1;
                }
                flag |= f;
            }

            let target = match flag {
                A => &mut only_a,
                B => &mut only_b,
                _ => {
                    for &p in self.parents(idx) {
                        queue.push((p, SHARED));
                    }
                    continue;
                }
            };

            // Follow a linear chain without touching the heap.
            target.push(idx);
            let mut cur = idx;
            while let [p] = *self.parents(cur) {
                if p + 1 != cur || queue.peek().is_some_and(|&(top, _)| top >= p) {
                    break;
                }
                target.push(p);
                cur = p;
            }
            for &p in self.parents(cur) {
                queue.push((p, flag));
                unshared += 1;
            }
        }
        Ok((only_a, only_b))
    }

    /// Critical-cut flags for the whole graph in arrival order: entry `c` is
    /// true iff the first `c` events form a critical version.
    pub fn critical_cuts(&self) -> Vec<bool> {
        let all: Vec<LocalIdx> = (0..self.len()).collect();
        self.critical_cuts_within(&all)
    }

    /// Critical-cut flags for the downward-closed subgraph `subset` (ascending).
    ///
    /// Cut `c` splits the subset into its first `c` events and the rest. It is
    /// critical iff every later event whose parents all lie before the cut has
    /// exactly the cut's frontier as its parents. An event `j` whose highest
    /// parent sits at position `m` can only satisfy that for cut `m + 1`, so it
    /// rules out every cut in `(m + 1, pos(j)]`, and cut `m + 1` unless its
    /// parents equal that frontier.
    pub fn critical_cuts_within(&self, subset: &[LocalIdx]) -> Vec<bool> {
        let n = subset.len();
        let whole = n == self.len();
        let pos_of = |idx: LocalIdx| -> usize {
            if whole {
                idx
            } else {
                subset.binary_search(&idx).expect("subset is downward closed")
            }
        };
        let in_subset = |idx: LocalIdx| whole || subset.binary_search(&idx).is_ok();

        // First child position of each event inside the subset.
        let first_child: Vec<usize> = subset
            .iter()
            .map(|&idx| {
                self.children(idx).iter().filter(|&&c| in_subset(c)).map(|&c| pos_of(c)).min().unwrap_or(usize::MAX)
            })
            .collect();

        // Frontier size at each cut.
        let mut frontier_len = vec![0usize; n + 1];
        for (pos, &idx) in subset.iter().enumerate() {
            let closed = self.parents(idx).iter().filter(|&&p| first_child[pos_of(p)] == pos).count();
            frontier_len[pos + 1] = frontier_len[pos] - closed + 1;
        }

        let mut ruled_out = vec![0i64; n + 2];
        let mut bad_cut = vec![false; n + 1];
        for (pos, &idx) in subset.iter().enumerate() {
            let parents = self.parents(idx);
            let cut = parents.iter().map(|&p| pos_of(p) + 1).max().unwrap_or(0);
            if cut < pos {
                ruled_out[cut + 1] += 1;
                ruled_out[pos + 1] -= 1;
            }
            let matches = parents.len() == frontier_len[cut] && parents.iter().all(|&p| first_child[pos_of(p)] >= cut);
            if !matches {
                bad_cut[cut] = true;
            }
        }

        let mut out = vec![false; n + 1];
        let mut running = 0i64;
        for c in 0..=n {
            running += ruled_out[c];
            out[c] = running == 0 && !bad_cut[c];
        }
        out
    }

    /// Whether `v` splits the graph into `Events(v)` and a remainder that
    /// happened after every event of `Events(v)`.
    pub fn is_critical(&self, v: &Frontier) -> Result<bool, GraphError> {
        let events = self.events_of(v)?;
        // A critical set is a prefix of every topological order, arrival order included.
        let is_prefix = events.last().is_none_or(|&last| last + 1 == events.len());
        Ok(is_prefix && self.critical_cuts()[events.len()])
    }

    /// All critical versions in topological order, starting with the root.
    pub fn find_critical_versions(&self) -> Vec<Frontier> {
        let cuts = self.critical_cuts();
        let mut out = Vec::new();
        let mut frontier = Frontier::root();
        for (c, critical) in cuts.into_iter().enumerate() {
            if c > 0 {
                frontier.advance(self.parents(c - 1), c - 1);
            }
            if critical {
                out.push(frontier.clone());
            }
        }
        out
    }

    /// Topological order of `Events(to) − Events(from)`.
    ///
    /// Depth-first from the oldest events: when several children become ready
    /// at once, the one heading the smaller branch goes first, with branch size
    /// estimated by summing descendant counts without deduplication. Equal
    /// estimates fall back to the lower index.
    pub fn sort_topological(&self, from: &Frontier, to: &Frontier) -> Result<Vec<LocalIdx>, GraphError> {
        let subset = if from.is_root() && to == &self.version {
            (0..self.len()).collect()
        } else {
            let (only_from, mut only_to) = self.diff(from, to)?;
            if !only_from.is_empty() {
                return Err(GraphError::NotAncestor);
            }
            only_to.reverse();
            only_to
        };
        Ok(self.sort_subset(&subset))
    }

    /// Sorts a downward-closed set of events given in ascending order.
    pub(crate) fn sort_subset(&self, subset: &[LocalIdx]) -> Vec<LocalIdx> {
        let n = subset.len();
        let whole = n == self.len();
        let local = |idx: LocalIdx| -> Option<usize> {
            if whole {
                Some(idx)
            } else {
                subset.binary_search(&idx).ok()
            }
        };

        let mut waiting = vec![0u32; n];
        for (k, &idx) in subset.iter().enumerate() {
            waiting[k] = self.parents(idx).iter().filter(|&&p| local(p).is_some()).count() as u32;
        }
        let mut estimate = vec![0u64; n];
        for k in (0..n).rev() {
            let mut sum = 0u64;
            for &c in self.children(subset[k]) {
                if let Some(ck) = local(c) {
                    sum = sum.saturating_add(1).saturating_add(estimate[ck]);
                }
            }
            estimate[k] = sum;
        }

        // Largest first onto the stack so the smallest branch pops next.
        let push_sorted = |stack: &mut Vec<usize>, mut ready: SmallVec<[usize; 4]>| {
            ready.sort_unstable_by_key(|&k| Reverse((estimate[k], k)));
            stack.extend(ready);
        };

        let mut stack = Vec::new();
        push_sorted(&mut stack, (0..n).filter(|&k| waiting[k] == 0).collect());
        let mut out = Vec::with_capacity(n);
        while let Some(k) = stack.pop() {
            let idx = subset[k];
            out.push(idx);
            let mut ready = SmallVec::new();
            for &c in self.children(idx) {
                if let Some(ck) = local(c) {
                    waiting[ck] -= 1;
                    if waiting[ck] == 0 {
                        ready.push(ck);
                    }
                }
            }
            push_sorted(&mut stack, ready);
        }
        debug_assert_eq!(out.len(), n);
        out
    }

    /// A uniformly chosen ready event at every step (Kahn's algorithm); used
    /// for determinism testing and `--order-seed`.
    pub fn random_topological_order<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<LocalIdx> {
        let n = self.len();
        let mut waiting: Vec<usize> = (0..n).map(|i| self.parents(i).len()).collect();
        let mut ready: Vec<LocalIdx> = (0..n).filter(|&i| waiting[i] == 0).collect();
        let mut out = Vec::with_capacity(n);
        while !ready.is_empty() {
            let pick = rng.gen_range(0..ready.len());
            let idx = ready.swap_remove(pick);
            out.push(idx);
            for &c in self.children(idx) {
                waiting[c] -= 1;
                if waiting[c] == 0 {
                    ready.push(c);
                }
            }
        }
        out
    }

    /// Checks that `order` lists exactly `subset` (ascending) with every
    /// parent before its child.
    pub fn check_order(&self, subset: &[LocalIdx], order: &[LocalIdx]) -> Result<(), GraphError> {
        if order.len() != subset.len() {
            return Err(GraphError::NotTopological);
        }
        let mut position = HashMap::with_capacity(order.len());
        for (i, &idx) in order.iter().enumerate() {
            if subset.binary_search(&idx).is_err() || position.insert(idx, i).is_some() {
                return Err(GraphError::NotTopological);
            }
        }
        for (i, &idx) in order.iter().enumerate() {
            for p in self.parents(idx) {
                if position.get(p).is_some_and(|&pi| pi >= i) {
                    return Err(GraphError::NotTopological);
                }
            }
        }
        Ok(())
    }
}

impl GraphError {
    // Errors raised below the id-resolution layer carry a stand-in id.
    fn with_id(self, id: &EventId) -> Self {
        match self {
            GraphError::RedundantParent(_) => GraphError::RedundantParent(id.clone()),
            other => other,
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ins(pos: usize, c: char) -> Operation {
        Operation::Insert { pos, content: c }
    }

    /// "Helo" → "Hello!" with two concurrent inserts at the end.
    pub(crate) fn helo_graph() -> EventGraph {
        let mut g = EventGraph::new();
        let mut prev = vec![];
        for (i, c) in "Helo".chars().enumerate() {
            let idx = g.push("A", &prev, ins(i, c)).unwrap();
            prev = vec![idx];
        }
        g.push("A", &[3], ins(3, 'l')).unwrap();
        g.push("B", &[3], ins(4, '!')).unwrap();
        g
    }

    fn chain(n: usize) -> EventGraph {
        let mut g = EventGraph::new();
        for i in 0..n {
            let parents: Vec<_> = i.checked_sub(1).into_iter().collect();
            g.push("A", &parents, ins(i, 'x')).unwrap();
        }
        g
    }

    /// The branching graph used to illustrate sort order (A, B and C branches).
    fn branchy() -> (EventGraph, HashMap<&'static str, LocalIdx>) {
        let mut g = EventGraph::new();
        let mut names = HashMap::new();
        let shape: [(&str, &[&str]); 13] = [
            ("A1", &[]),
            ("A2", &["A1"]),
            ("A3", &["A2"]),
            ("A4", &["A3"]),
            ("B1", &["A1"]),
            ("B2", &["B1"]),
            ("B3", &["B2", "A3"]),
            ("B4", &["B3"]),
            ("C1", &["A2"]),
            ("C2", &["C1"]),
            ("C3", &["C2"]),
            ("A5", &["A4", "B2"]),
            ("A6", &["A5", "C3"]),
        ];
        for (name, parents) in shape {
            let ps: Vec<_> = parents.iter().map(|p| names[p]).collect();
            let idx = g.push(&name[..1], &ps, ins(0, 'x')).unwrap();
            names.insert(name, idx);
        }
        (g, names)
    }

    #[test]
    fn first_event_gets_index_zero() {
        let mut g = EventGraph::new();
        let idx = g.add_event(Event::new(EventId::new("A", 0), vec![], ins(0, 'a'))).unwrap();
        assert_eq!(idx, 0);
        assert_eq!(g.version(), &Frontier::single(0));
    }

    #[test]
    fn helo_frontier_is_the_two_concurrent_inserts() {
        let g = helo_graph();
        assert_eq!(g.version().as_slice(), &[4, 5]);
    }

    #[test]
    fn add_event_errors() {
        let mut g = helo_graph();
        let missing = Event::new(EventId::new("C", 0), vec![EventId::new("Z", 9)], ins(0, 'x'));
        assert!(matches!(g.add_event(missing), Err(GraphError::MissingParent { .. })));
        let dup = Event::new(EventId::new("A", 0), vec![], ins(0, 'x'));
        assert!(matches!(g.add_event(dup), Err(GraphError::DuplicateId(_))));
        let selfp = Event::new(EventId::new("C", 0), vec![EventId::new("C", 0)], ins(0, 'x'));
        assert!(matches!(g.add_event(selfp), Err(GraphError::SelfParent(_))));
        let redundant = Event::new(EventId::new("C", 0), vec![EventId::new("A", 0), EventId::new("A", 3)], ins(0, 'x'));
        assert!(matches!(g.add_event(redundant), Err(GraphError::RedundantParent(_))));
        assert_eq!(g.len(), 6);
    }

    #[test]
    fn critical_versions_of_a_chain_are_every_prefix() {
        let g = chain(3);
        let expected: Vec<Frontier> =
            vec![Frontier::root(), Frontier::single(0), Frontier::single(1), Frontier::single(2)];
        assert_eq!(g.find_critical_versions(), expected);
    }

    #[test]
    fn helo_criticals_exclude_the_concurrent_tails() {
        let g = helo_graph();
        let crit = g.find_critical_versions();
        assert!(crit.contains(&Frontier::single(3)));
        assert!(!crit.contains(&Frontier::single(4)));
        assert!(!crit.contains(&Frontier::single(5)));
        assert!(crit.contains(&Frontier::new([4, 5])));
    }

    #[test]
    fn concurrent_roots_are_critical_only_after_merge() {
        let mut g = EventGraph::new();
        g.push("A", &[], ins(0, 'a')).unwrap();
        g.push("B", &[], ins(0, 'b')).unwrap();
        g.push("A", &[0, 1], ins(0, 'c')).unwrap();
        let crit = g.find_critical_versions();
        assert_eq!(crit, vec![Frontier::root(), Frontier::new([0, 1]), Frontier::single(2)]);
        assert!(!g.is_critical(&Frontier::single(0)).unwrap());
    }

    #[test]
    fn sort_keeps_chain_order() {
        let g = chain(5);
        assert_eq!(g.sort_topological(&Frontier::root(), g.version()).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sort_visits_smaller_branches_first() {
        let (g, names) = branchy();
        let order = g.sort_topological(&Frontier::root(), g.version()).unwrap();
        let expected: Vec<_> = ["A1", "B1", "B2", "A2", "C1", "C2", "C3", "A3", "B3", "B4", "A4", "A5", "A6"]
            .iter()
            .map(|n| names[n])
            .collect();
        assert_eq!(order, expected);
        let all: Vec<_> = (0..g.len()).collect();
        g.check_order(&all, &order).unwrap();
    }

    #[test]
    fn sort_between_versions() {
        let (g, names) = branchy();
        let from = Frontier::single(names["A4"]);
        let to = Frontier::single(names["A5"]);
        let order = g.sort_topological(&from, &to).unwrap();
        assert_eq!(order, vec![names["B1"], names["B2"], names["A5"]]);
        assert_eq!(g.sort_topological(&to, &from), Err(GraphError::NotAncestor));
    }

    #[test]
    fn diff_of_equal_versions_is_empty() {
        let g = helo_graph();
        assert_eq!(g.diff(g.version(), g.version()).unwrap(), (vec![], vec![]));
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let g = helo_graph();
        assert!(matches!(g.events_of(&Frontier::single(99)), Err(GraphError::UnknownId(_))));
        assert!(matches!(g.diff(&Frontier::root(), &Frontier::single(99)), Err(GraphError::UnknownId(_))));
        assert!(g.frontier_from_ids(&[EventId::new("Q", 0)]).is_err());
    }

    #[test]
    fn event_id_parses_with_at_in_agent() {
        let id: EventId = "a@b@12".parse().unwrap();
        assert_eq!(id, EventId::new("a@b", 12));
        assert!("nope".parse::<EventId>().is_err());
        assert!("@3".parse::<EventId>().is_err());
    }

    #[test]
    fn random_orders_are_topological() {
        let (g, _) = branchy();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let all: Vec<_> = (0..g.len()).collect();
        for _ in 0..50 {
            let order = g.random_topological_order(&mut rng);
            g.check_order(&all, &order).unwrap();
        }
    }
}
