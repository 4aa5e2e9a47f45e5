//! The transient merge state: every character the walk has seen, each with
//! its visibility in the prepare version (where incoming indexes are
//! interpreted) and in the effect version (where transformed ops are emitted).

use std::cell::Cell;
use std::cmp::Ordering;
use std::collections::HashMap;

use thiserror::Error;

use crate::causal_graph::{EventGraph, Frontier, GraphError, LocalIdx, Operation};
use crate::index_tree::{Cursor, SeqTree};
use crate::replay::TransformedOp;

/// Character id. Real characters use the [`LocalIdx`] of the inserting event;
/// characters standing for content that predates the state get ids from
/// [`PLACEHOLDER_BASE`] upwards, numbered by their index in that content.
pub type CharId = usize;

pub const PLACEHOLDER_BASE: CharId = usize::MAX / 2;
/// Length of a placeholder standing for a document of unknown length.
pub const UNBOUNDED: usize = usize::MAX / 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrepareState {
    NotInsertedYet,
    Ins,
    /// Deleted by this many delete events of the prepare version.
    Del(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EffectState {
    Ins,
    Del,
}

/// A run of characters inserted by consecutive events, each typed just after
/// the previous one. Character `k > 0` of the run has the preceding character
/// as its left origin and shares the run's right origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentedRecord {
    pub id: CharId,
    pub len: usize,
    /// `None` is the start of the document.
    pub origin_left: Option<CharId>,
    /// `None` is the end of the document.
    pub origin_right: Option<CharId>,
    pub prepare: PrepareState,
    pub effect: EffectState,
    pub is_placeholder: bool,
}

impl AugmentedRecord {
    pub fn placeholder(id: CharId, len: usize) -> Self {
        AugmentedRecord {
            id,
            len,
            origin_left: None,
            origin_right: None,
            prepare: PrepareState::Ins,
            effect: EffectState::Ins,
            is_placeholder: true,
        }
    }

    pub fn end(&self) -> CharId {
        self.id + self.len
    }

    pub fn prepare_len(&self) -> usize {
        if self.prepare == PrepareState::Ins {
            self.len
        } else {
            0
        }
    }

    pub fn effect_len(&self) -> usize {
        if self.effect == EffectState::Ins {
            self.len
        } else {
            0
        }
    }

    /// Whether `next` continues this run.
    pub fn can_append(&self, next: &AugmentedRecord) -> bool {
        if self.end() != next.id || self.is_placeholder != next.is_placeholder {
            return false;
        }
        if self.is_placeholder {
            return true;
        }
        if self.prepare != next.prepare || self.effect != next.effect {
            return false;
        }
        // Characters split off a placeholder carry no origins.
        if self.id >= PLACEHOLDER_BASE {
            return true;
        }
        next.origin_left == Some(self.end() - 1) && next.origin_right == self.origin_right
    }

    /// Truncates to `offset` characters and returns the remainder.
    pub fn split_off(&mut self, offset: usize) -> AugmentedRecord {
        debug_assert!(offset > 0 && offset < self.len);
        let mut tail = *self;
        tail.id += offset;
        tail.len -= offset;
        if !self.is_placeholder && self.id < PLACEHOLDER_BASE {
            tail.origin_left = Some(tail.id - 1);
        }
        self.len = offset;
        tail
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StateError {
    #[error("event {event} applied while the prepare version is not its parent version")]
    VersionMismatch { event: LocalIdx },
    #[error("event {event}: index {pos} out of range for document of length {len}")]
    IndexOutOfRange { event: LocalIdx, pos: usize, len: usize },
    #[error("event {0} was already applied")]
    AlreadyApplied(LocalIdx),
    #[error("event {0} has not been applied to this state")]
    NotApplied(LocalIdx),
    #[error("cannot {action} event {event}: its character is in state {from:?}")]
    IllegalTransition { event: LocalIdx, from: PrepareState, action: &'static str },
    #[error("event {0} is not at the edge of the prepare version")]
    OutOfOrder(LocalIdx),
    #[error("version is not critical")]
    NotCritical,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Work counters of a replay or merge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct Counters {
    pub applies: u64,
    pub retreats: u64,
    pub advances: u64,
    pub splits: u64,
    pub fast_path: u64,
    pub clears: u64,
    pub peak_records: u64,
}

impl Counters {
    pub(crate) fn absorb(&mut self, other: &Counters) {
        self.applies += other.applies;
        self.retreats += other.retreats;
        self.advances += other.advances;
        self.splits += other.splits;
        self.fast_path += other.fast_path;
        self.clears += other.clears;
        self.peak_records = self.peak_records.max(other.peak_records);
    }
}

thread_local! {
    static LIVE_STATES: Cell<usize> = const { Cell::new(0) };
    static INVERT_TIE_BREAK: Cell<bool> = const { Cell::new(false) };
}

/// How many [`MergeState`]s currently exist on this thread.
pub fn live_merge_states() -> usize {
    LIVE_STATES.with(|c| c.get())
}

/// Deliberately flips the concurrent-insert tie break on this thread. Only
/// exists so the fuzzer can show it catches an ordering bug.
#[doc(hidden)]
pub fn set_inverted_tie_break(on: bool) {
    INVERT_TIE_BREAK.with(|c| c.set(on));
}

pub struct MergeState<'g> {
    graph: &'g EventGraph,
    tree: SeqTree,
    /// Delete event to the character it removed.
    deletes: HashMap<LocalIdx, CharId>,
    prepare: Frontier,
    effect: Frontier,
    counters: Counters,
}

impl Drop for MergeState<'_> {
    fn drop(&mut self) {
        LIVE_STATES.with(|c| c.set(c.get() - 1));
    }
}

impl<'g> MergeState<'g> {
    /// A state at `base`, whose content is unknown and represented by one
    /// unbounded placeholder.
    pub fn new(graph: &'g EventGraph, base: Frontier) -> Result<Self, StateError> {
        if !graph.is_critical(&base)? {
            return Err(StateError::NotCritical);
        }
        Ok(Self::unbounded_at(graph, base))
    }

    pub(crate) fn unbounded_at(graph: &'g EventGraph, base: Frontier) -> Self {
        Self::from_tree(graph, base, SeqTree::with_record(AugmentedRecord::placeholder(PLACEHOLDER_BASE, UNBOUNDED)))
    }

    /// A state at `base` where the document is known to be `len` characters
    /// long, so out-of-range indexes are detected.
    pub(crate) fn with_base_len(graph: &'g EventGraph, base: Frontier, len: usize) -> Self {
        let tree = if len == 0 {
            SeqTree::new()
        } else {
            SeqTree::with_record(AugmentedRecord::placeholder(PLACEHOLDER_BASE, len))
        };
        Self::from_tree(graph, base, tree)
    }

    fn from_tree(graph: &'g EventGraph, base: Frontier, tree: SeqTree) -> Self {
        LIVE_STATES.with(|c| c.set(c.get() + 1));
        MergeState {
            graph,
            tree,
            deletes: HashMap::new(),
            prepare: base.clone(),
            effect: base,
            counters: Counters { peak_records: 1, ..Counters::default() },
        }
    }

    pub fn prepare_version(&self) -> &Frontier {
        &self.prepare
    }

    pub fn effect_version(&self) -> &Frontier {
        &self.effect
    }

    pub fn counters(&self) -> Counters {
        Counters { splits: self.tree.splits(), ..self.counters }
    }

    pub fn tree(&self) -> &SeqTree {
        &self.tree
    }

    pub fn records(&self) -> Vec<AugmentedRecord> {
        self.tree.iter().copied().collect()
    }

    /// Per-character `(id, prepare, effect)` for every non-placeholder record.
    pub fn char_states(&self) -> Vec<(CharId, PrepareState, EffectState)> {
        self.tree
            .iter()
            .filter(|r| !r.is_placeholder)
            .flat_map(|r| (r.id..r.end()).map(move |id| (id, r.prepare, r.effect)))
            .collect()
    }

    /// The character event `e` deleted, if `e` is an applied delete.
    pub fn delete_target(&self, e: LocalIdx) -> Option<CharId> {
        self.deletes.get(&e).copied()
    }

    /// Applies event `e`, whose parents must equal the prepare version.
    pub fn apply(&mut self, e: LocalIdx) -> Result<TransformedOp, StateError> {
        if self.graph.parents(e) != self.prepare.as_slice() {
            return Err(StateError::VersionMismatch { event: e });
        }
        let visible = self.tree.total().prepare;
        let op = match self.graph.op(e) {
            Operation::Insert { pos, content } => {
                if self.tree.find_char(e).is_some() {
                    return Err(StateError::AlreadyApplied(e));
                }
                let gap =
                    self.tree.prepare_gap(pos).ok_or(StateError::IndexOutOfRange { event: e, pos, len: visible })?;
                let origin_left = (pos > 0).then(|| self.tree.record(gap.leaf, gap.idx).id + gap.offset - 1);
                let origin_right = self.first_known_from(gap);
                let dest = self.integrate(e, gap, origin_left, origin_right);
                let at = self.tree.effect_index(dest);
                self.tree.insert_at(
                    dest,
                    AugmentedRecord {
                        id: e,
                        len: 1,
                        origin_left,
                        origin_right,
                        prepare: PrepareState::Ins,
                        effect: EffectState::Ins,
                        is_placeholder: false,
                    },
                );
                TransformedOp::Insert { pos: at, content, source: e }
            }
            Operation::Delete { pos } => {
                if self.deletes.contains_key(&e) {
                    return Err(StateError::AlreadyApplied(e));
                }
                let cursor =
                    self.tree.find_prepare(pos).ok_or(StateError::IndexOutOfRange { event: e, pos, len: visible })?;
                let at = self.tree.effect_index(cursor);
                let target = self.tree.record(cursor.leaf, cursor.idx).id + cursor.offset;
                let was_visible = self.tree.update(cursor, 1, |r| {
                    // A character found by prepare index is Ins, or sits in a
                    // placeholder which behaves as Ins.
                    assert_eq!(r.prepare, PrepareState::Ins, "delete target must be visible in the prepare version");
                    r.is_placeholder = false;
                    r.prepare = PrepareState::Del(1);
                    std::mem::replace(&mut r.effect, EffectState::Del) == EffectState::Ins
                });
                self.deletes.insert(e, target);
                if was_visible {
                    TransformedOp::Delete { pos: at, source: e }
                } else {
                    TransformedOp::Noop { source: e }
                }
            }
        };
        self.prepare = Frontier::single(e);
        self.effect.advance(self.graph.parents(e), e);
        self.counters.applies += 1;
        self.counters.peak_records = self.counters.peak_records.max(self.tree.record_count() as u64);
        Ok(op)
    }

    // First character at or after `gap` that exists in the prepare version.
    fn first_known_from(&self, gap: Cursor) -> Option<CharId> {
        let from = match self.tree.leaf_record(gap) {
            Some(r) if gap.offset > 0 && gap.offset < r.len => return Some(r.id + gap.offset),
            Some(_) if gap.offset > 0 => gap.idx + 1,
            _ => gap.idx,
        };
        let mut at = self.tree.record_from(gap.leaf, from);
        while let Some((l, i)) = at {
            let r = self.tree.record(l, i);
            if r.prepare != PrepareState::NotInsertedYet {
                return Some(r.id);
            }
            at = self.tree.record_from(l, i + 1);
        }
        None
    }

    // Picks the final position for a new character, ordering it among
    // concurrent insertions that share the gap. Only records that are not in
    // the prepare version can sit between the gap and the right origin.
    fn integrate(&self, e: LocalIdx, gap: Cursor, origin_left: Option<CharId>, origin_right: Option<CharId>) -> Cursor {
        let (mut after, mut next) = match self.tree.leaf_record(gap) {
            Some(r) if gap.offset > 0 && gap.offset < r.len => return gap,
            Some(_) if gap.offset > 0 => {
                let after = Cursor { leaf: gap.leaf, idx: gap.idx + 1, offset: 0 };
                (after, self.tree.record_from(gap.leaf, gap.idx + 1))
            }
            _ => (gap, self.tree.record_from(gap.leaf, gap.idx)),
        };
        let mut dest = after;
        let mut scanning = false;
        let mut scanned: Vec<(CharId, CharId)> = Vec::new();
        loop {
            if !scanning {
                dest = after;
            }
            let Some((l, i)) = next else { break };
            let other = self.tree.record(l, i);
            if Some(other.id) == origin_right {
                break;
            }
            debug_assert_eq!(other.prepare, PrepareState::NotInsertedYet);

            let left = if other.origin_left == origin_left {
                Ordering::Equal
            } else if other.origin_left.is_some_and(|o| scanned.iter().any(|&(s, end)| s <= o && o < end)) {
                Ordering::Greater
            } else {
                Ordering::Less
            };
            match left {
                Ordering::Less => break,
                Ordering::Equal => match self.cmp_origins(other.origin_right, origin_right) {
                    Ordering::Equal => {
                        if self.goes_first(e, other.id) {
                            break;
                        }
                        scanning = false;
                    }
                    Ordering::Less => scanning = true,
                    Ordering::Greater => scanning = false,
                },
                Ordering::Greater => {}
            }
            scanned.push((other.id, other.end()));
            after = Cursor { leaf: l, idx: i + 1, offset: 0 };
            next = self.tree.record_from(l, i + 1);
        }
        dest
    }

    fn cmp_origins(&self, a: Option<CharId>, b: Option<CharId>) -> Ordering {
        match (a, b) {
            (None, None) => Ordering::Equal,
            (None, Some(_)) => Ordering::Greater,
            (Some(_), None) => Ordering::Less,
            (Some(a), Some(b)) if a == b => Ordering::Equal,
            (Some(a), Some(b)) => {
                let ca = self.tree.find_char(a).expect("origins stay in the state");
                let cb = self.tree.find_char(b).expect("origins stay in the state");
                self.tree.cmp_cursors(ca, cb)
            }
        }
    }

    // Tie break between concurrent insertions with identical origins.
    fn goes_first(&self, ours: LocalIdx, theirs: LocalIdx) -> bool {
        let want = if INVERT_TIE_BREAK.with(|c| c.get()) { Ordering::Greater } else { Ordering::Less };
        self.graph.cmp_authors(ours, theirs) == want
    }

    fn step(&mut self, e: LocalIdx, forward: bool) -> Result<(), StateError> {
        let action = if forward { "advance" } else { "retreat" };
        let (target, is_insert) = match self.graph.op(e) {
            Operation::Insert { .. } => (e, true),
            Operation::Delete { .. } => (*self.deletes.get(&e).ok_or(StateError::NotApplied(e))?, false),
        };
        let cursor = self.tree.find_char(target).ok_or(StateError::NotApplied(e))?;
        let moved = self.tree.update(cursor, 1, |r| {
            use PrepareState::*;
            let next = match (is_insert, forward, r.prepare) {
                (true, false, Ins) => NotInsertedYet,
                (true, true, NotInsertedYet) => Ins,
                (false, false, Del(1)) => Ins,
                (false, false, Del(n)) => Del(n - 1),
                (false, true, Ins) => Del(1),
                (false, true, Del(n)) => Del(n + 1),
                (_, _, from) => return Err(from),
            };
            r.prepare = next;
            Ok(())
        });
        moved.map_err(|from| StateError::IllegalTransition { event: e, from, action })?;
        if forward {
            self.counters.advances += 1;
        } else {
            self.counters.retreats += 1;
        }
        Ok(())
    }

    /// Removes `e`, a maximal event of the prepare version, from it.
    pub fn retreat(&mut self, e: LocalIdx) -> Result<(), StateError> {
        if !self.prepare.contains(e) {
            return Err(StateError::OutOfOrder(e));
        }
        self.step(e, false)?;
        let mut rest: Vec<LocalIdx> = self.prepare.iter().filter(|&x| x != e).collect();
        rest.extend_from_slice(self.graph.parents(e));
        self.prepare = self.graph.reduce(&rest);
        Ok(())
    }

    /// Adds `e`, whose parents must all be in the prepare version.
    pub fn advance(&mut self, e: LocalIdx) -> Result<(), StateError> {
        let parents = self.graph.parents(e);
        if self.graph.version_contains(&self.prepare, e)
            || !parents.iter().all(|&p| self.graph.version_contains(&self.prepare, p))
        {
            return Err(StateError::OutOfOrder(e));
        }
        self.step(e, true)?;
        self.prepare.advance(parents, e);
        Ok(())
    }

    /// Moves the prepare version to `target`, which must lie within the
    /// effect version.
    pub fn set_prepare_version(&mut self, target: &[LocalIdx]) -> Result<(), StateError> {
        if self.prepare.as_slice() == target {
            return Ok(());
        }
        let target = Frontier::from(target);
        let (retreat, advance) = self.graph.diff(&self.prepare, &target)?;
        for &e in &retreat {
            self.step(e, false)?;
        }
        for &e in advance.iter().rev() {
            self.step(e, true)?;
        }
        self.prepare = target;
        Ok(())
    }

    /// Forgets all per-character metadata, keeping only the document length.
    pub fn clear(&mut self) -> Result<(), StateError> {
        if self.prepare != self.effect || !self.graph.is_critical(&self.effect)? {
            return Err(StateError::NotCritical);
        }
        let len = self.tree.total().effect;
        self.tree = if len == 0 {
            SeqTree::new()
        } else {
            SeqTree::with_record(AugmentedRecord::placeholder(PLACEHOLDER_BASE, len))
        };
        self.deletes.clear();
        self.counters.clears += 1;
        Ok(())
    }
}
