//! Order-statistic B-tree over the internal record sequence.
//!
//! Leaves hold runs of [`AugmentedRecord`]s in document order. Every internal
//! node caches, per child, how many characters are visible in the prepare and
//! effect versions, so both "find the i-th visible character" and "how many
//! characters precede this one" are logarithmic.
//!
//! A second structure, the [`Locator`], maps character ids to the leaf that
//! holds them. Entries are keyed by id runs, so a typed run of characters that
//! lives in one leaf costs a single entry. Leaf splits rewrite the entries of
//! the records they move.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::internal_state::{AugmentedRecord, CharId};

pub(crate) const LEAF_CAP: usize = 32;
pub(crate) const NODE_CAP: usize = 32;

pub type LeafId = usize;
type NodeId = usize;

/// Visible character counts of a subtree.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub prepare: usize,
    pub effect: usize,
}

impl Counts {
    fn of(records: &[AugmentedRecord]) -> Counts {
        records.iter().fold(Counts::default(), |acc, r| Counts {
            prepare: acc.prepare + r.prepare_len(),
            effect: acc.effect + r.effect_len(),
        })
    }

    fn add(&mut self, other: Counts) {
        self.prepare += other.prepare;
        self.effect += other.effect;
    }

    fn shift(&mut self, from: Counts, to: Counts) {
        self.prepare = self.prepare - from.prepare + to.prepare;
        self.effect = self.effect - from.effect + to.effect;
    }
}

/// A position inside the sequence: record `idx` of `leaf`, `offset` characters
/// into it. `offset == len` and `idx == records.len()` both denote gaps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cursor {
    pub leaf: LeafId,
    pub idx: usize,
    pub offset: usize,
}

#[derive(Clone, Debug)]
struct Leaf {
    records: Vec<AugmentedRecord>,
    parent: NodeId,
    next: Option<LeafId>,
}

#[derive(Clone, Debug)]
struct Node {
    parent: Option<NodeId>,
    children: Vec<usize>,
    counts: Vec<Counts>,
    leaf_children: bool,
}

/// Id-run to leaf mapping.
#[derive(Clone, Debug, Default)]
pub struct Locator {
    runs: BTreeMap<CharId, (usize, LeafId)>,
}

impl Locator {
    pub fn get(&self, id: CharId) -> Option<LeafId> {
        let (&start, &(len, leaf)) = self.runs.range(..=id).next_back()?;
        (id < start + len).then_some(leaf)
    }

    /// Points `[start, start + len)` at `leaf`, overwriting any previous entries.
    pub fn set(&mut self, start: CharId, len: usize, leaf: LeafId) {
        if len == 0 {
            return;
        }
        let end = start + len;
        if let Some((&k, &(l, lf))) = self.runs.range(..start).next_back() {
            if k + l > start {
                self.runs.insert(k, (start - k, lf));
                if k + l > end {
                    self.runs.insert(end, (k + l - end, lf));
                }
            }
        }
        while let Some((&k, &(l, lf))) = self.runs.range(start..end).next() {
            self.runs.remove(&k);
            if k + l > end {
                self.runs.insert(end, (k + l - end, lf));
            }
        }

        let (mut s, mut l) = (start, len);
        if let Some((&k, &(pl, lf))) = self.runs.range(..start).next_back() {
            if k + pl == start && lf == leaf {
                self.runs.remove(&k);
                s = k;
                l += pl;
            }
        }
        if let Some(&(nl, lf)) = self.runs.get(&end) {
            if lf == leaf {
                self.runs.remove(&end);
                l += nl;
            }
        }
        self.runs.insert(s, (l, leaf));
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct SeqTree {
    leaves: Vec<Leaf>,
    nodes: Vec<Node>,
    root: NodeId,
    locator: Locator,
    total: Counts,
    records: usize,
    splits: u64,
}

impl Default for SeqTree {
    fn default() -> Self {
        Self::new()
    }
}

impl SeqTree {
    pub fn new() -> Self {
        SeqTree {
            leaves: vec![Leaf { records: Vec::new(), parent: 0, next: None }],
            nodes: vec![Node { parent: None, children: vec![0], counts: vec![Counts::default()], leaf_children: true }],
            root: 0,
            locator: Locator::default(),
            total: Counts::default(),
            records: 0,
            splits: 0,
        }
    }

    pub fn with_record(record: AugmentedRecord) -> Self {
        let mut tree = Self::new();
        tree.insert_at(Cursor { leaf: 0, idx: 0, offset: 0 }, record);
        tree
    }

    pub fn total(&self) -> Counts {
        self.total
    }

    pub fn record_count(&self) -> usize {
        self.records
    }

    /// Number of record splits performed so far.
    pub fn splits(&self) -> u64 {
        self.splits
    }

    pub fn height(&self) -> usize {
        let mut h = 1;
        let mut node = self.root;
        while !self.nodes[node].leaf_children {
            node = self.nodes[node].children[0];
            h += 1;
        }
        h
    }

    pub fn record(&self, leaf: LeafId, idx: usize) -> &AugmentedRecord {
        &self.leaves[leaf].records[idx]
    }

    /// The record a cursor points into, if it is not past the end of its leaf.
    pub fn leaf_record(&self, cursor: Cursor) -> Option<&AugmentedRecord> {
        self.leaves[cursor.leaf].records.get(cursor.idx)
    }

    /// The record at `(leaf, idx)`, or the first one after it.
    pub fn record_from(&self, mut leaf: LeafId, mut idx: usize) -> Option<(LeafId, usize)> {
        loop {
            if idx < self.leaves[leaf].records.len() {
                return Some((leaf, idx));
            }
            leaf = self.leaves[leaf].next?;
            idx = 0;
        }
    }

    pub fn start(&self) -> Cursor {
        Cursor { leaf: 0, idx: 0, offset: 0 }
    }

    /// Records in sequence order.
    pub fn iter(&self) -> impl Iterator<Item = &AugmentedRecord> + '_ {
        let mut leaf = Some(0);
        std::iter::from_fn(move || {
            let l = leaf?;
            leaf = self.leaves[l].next;
            Some(self.leaves[l].records.iter())
        })
        .flatten()
    }

    /// Locates the `i`-th character visible in the prepare version.
    pub fn find_prepare(&self, i: usize) -> Option<Cursor> {
        if i >= self.total.prepare {
            return None;
        }
        let mut rem = i;
        let mut node = self.root;
        loop {
            let n = &self.nodes[node];
            let mut chosen = None;
            for (k, c) in n.counts.iter().enumerate() {
                if rem < c.prepare {
                    chosen = Some(n.children[k]);
                    break;
                }
                rem -= c.prepare;
            }
            let child = chosen.expect("node counts cover the index");
            if n.leaf_children {
                for (idx, r) in self.leaves[child].records.iter().enumerate() {
                    let len = r.prepare_len();
                    if rem < len {
                        return Some(Cursor { leaf: child, idx, offset: rem });
                    }
                    rem -= len;
                }
                unreachable!("leaf counts cover the index");
            }
            node = child;
        }
    }

    /// The gap an insert at prepare index `i` starts from: just after the
    /// `(i-1)`-th visible character, or the very start for `i == 0`.
    pub fn prepare_gap(&self, i: usize) -> Option<Cursor> {
        if i == 0 {
            return Some(self.start());
        }
        let c = self.find_prepare(i - 1)?;
        Some(Cursor { offset: c.offset + 1, ..c })
    }

    /// Number of effect-visible characters strictly before `cursor`.
    pub fn effect_index(&self, cursor: Cursor) -> usize {
        let leaf = &self.leaves[cursor.leaf];
        let mut sum: usize = leaf.records[..cursor.idx].iter().map(|r| r.effect_len()).sum();
        if let Some(r) = leaf.records.get(cursor.idx) {
            if r.effect_len() > 0 {
                sum += cursor.offset;
            }
        }
        let mut child = cursor.leaf;
        let mut node = Some(leaf.parent);
        while let Some(n) = node {
            let nd = &self.nodes[n];
            let pos = nd.children.iter().position(|&c| c == child).expect("child listed in parent");
            sum += nd.counts[..pos].iter().map(|c| c.effect).sum::<usize>();
            child = n;
            node = nd.parent;
        }
        sum
    }

    pub fn find_char(&self, id: CharId) -> Option<Cursor> {
        let leaf = self.locator.get(id)?;
        self.leaves[leaf].records.iter().position(|r| r.id <= id && id < r.end()).map(|idx| Cursor {
            leaf,
            idx,
            offset: id - self.leaves[leaf].records[idx].id,
        })
    }

    fn path(&self, leaf: LeafId) -> Vec<usize> {
        let mut out = Vec::new();
        let mut child = leaf;
        let mut node = Some(self.leaves[leaf].parent);
        while let Some(n) = node {
            let nd = &self.nodes[n];
            out.push(nd.children.iter().position(|&c| c == child).expect("child listed in parent"));
            child = n;
            node = nd.parent;
        }
        out.reverse();
        out
    }

    /// Sequence order of two cursors.
    pub fn cmp_cursors(&self, a: Cursor, b: Cursor) -> Ordering {
        if a.leaf != b.leaf {
            return self.path(a.leaf).cmp(&self.path(b.leaf));
        }
        (a.idx, a.offset).cmp(&(b.idx, b.offset))
    }

    /// Inserts `record` at a gap, splitting the record under the cursor if the
    /// gap lies inside it, and run-merging with its neighbours when possible.
    pub fn insert_at(&mut self, cursor: Cursor, record: AugmentedRecord) {
        let Cursor { leaf, mut idx, offset } = cursor;
        if offset > 0 {
            let len = self.leaves[leaf].records[idx].len;
            if offset < len {
                let tail = self.leaves[leaf].records[idx].split_off(offset);
                self.splits += 1;
                self.records += 1;
                self.leaves[leaf].records.insert(idx + 1, tail);
            }
            idx += 1;
        }
        self.locator.set(record.id, record.len, leaf);
        let records = &mut self.leaves[leaf].records;
        if idx > 0 && records[idx - 1].can_append(&record) {
            records[idx - 1].len += record.len;
            idx -= 1;
        } else {
            records.insert(idx, record);
            self.records += 1;
        }
        self.merge_next(leaf, idx);
        self.refresh(leaf);
    }

    /// Applies `f` to the `len` characters starting at `cursor` (which must all
    /// lie in one record), isolating them first and re-merging afterwards.
    pub fn update<R>(&mut self, cursor: Cursor, len: usize, f: impl FnOnce(&mut AugmentedRecord) -> R) -> R {
        let Cursor { leaf, mut idx, offset } = cursor;
        let records = &mut self.leaves[leaf].records;
        debug_assert!(offset + len <= records[idx].len);
        if offset > 0 {
            let tail = records[idx].split_off(offset);
            records.insert(idx + 1, tail);
            idx += 1;
            self.splits += 1;
            self.records += 1;
        }
        if len < records[idx].len {
            let tail = records[idx].split_off(len);
            records.insert(idx + 1, tail);
            self.splits += 1;
            self.records += 1;
        }
        let out = f(&mut records[idx]);
        self.merge_next(leaf, idx);
        if idx > 0 {
            self.merge_next(leaf, idx - 1);
        }
        self.refresh(leaf);
        out
    }

    fn merge_next(&mut self, leaf: LeafId, idx: usize) {
        let records = &mut self.leaves[leaf].records;
        if idx + 1 < records.len() && records[idx].can_append(&records[idx + 1]) {
            let next = records.remove(idx + 1);
            records[idx].len += next.len;
            self.records -= 1;
        }
    }

    // Recomputes a leaf's counts, pushes the change to the root and splits the
    // leaf if it overflowed.
    fn refresh(&mut self, leaf: LeafId) {
        let now = Counts::of(&self.leaves[leaf].records);
        let mut child = leaf;
        let mut node = Some(self.leaves[leaf].parent);
        let mut before = None;
        while let Some(n) = node {
            let nd = &mut self.nodes[n];
            let pos = nd.children.iter().position(|&c| c == child).expect("child listed in parent");
            let old = *before.get_or_insert(nd.counts[pos]);
            nd.counts[pos].shift(old, now);
            child = n;
            node = nd.parent;
        }
        if let Some(old) = before {
            self.total.shift(old, now);
        }
        if self.leaves[leaf].records.len() > LEAF_CAP {
            self.split_leaf(leaf);
        }
    }

    fn split_leaf(&mut self, leaf: LeafId) {
        let half = self.leaves[leaf].records.len() / 2;
        let moved = self.leaves[leaf].records.split_off(half);
        let new_leaf = self.leaves.len();
        let parent = self.leaves[leaf].parent;
        for r in &moved {
            self.locator.set(r.id, r.len, new_leaf);
        }
        let moved_counts = Counts::of(&moved);
        self.leaves.push(Leaf { records: moved, parent, next: self.leaves[leaf].next });
        self.leaves[leaf].next = Some(new_leaf);

        let nd = &mut self.nodes[parent];
        let pos = nd.children.iter().position(|&c| c == leaf).expect("child listed in parent");
        nd.counts[pos].shift(moved_counts, Counts::default());
        nd.children.insert(pos + 1, new_leaf);
        nd.counts.insert(pos + 1, moved_counts);
        if nd.children.len() > NODE_CAP {
            self.split_node(parent);
        }
    }

    fn split_node(&mut self, node: NodeId) {
        let half = self.nodes[node].children.len() / 2;
        let children = self.nodes[node].children.split_off(half);
        let counts = self.nodes[node].counts.split_off(half);
        let leaf_children = self.nodes[node].leaf_children;
        let new_node = self.nodes.len();
        for &c in &children {
            if leaf_children {
                self.leaves[c].parent = new_node;
            } else {
                self.nodes[c].parent = Some(new_node);
            }
        }
        let new_sum = counts.iter().fold(Counts::default(), |mut a, &c| {
            a.add(c);
            a
        });
        let old_sum = self.nodes[node].counts.iter().fold(Counts::default(), |mut a, &c| {
            a.add(c);
            a
        });
        let parent = self.nodes[node].parent;
        self.nodes.push(Node { parent, children, counts, leaf_children });

        match parent {
            None => {
                let root = self.nodes.len();
                self.nodes.push(Node {
                    parent: None,
                    children: vec![node, new_node],
                    counts: vec![old_sum, new_sum],
                    leaf_children: false,
                });
                self.nodes[node].parent = Some(root);
                self.nodes[new_node].parent = Some(root);
                self.root = root;
            }
            Some(p) => {
                let nd = &mut self.nodes[p];
                let pos = nd.children.iter().position(|&c| c == node).expect("child listed in parent");
                nd.counts[pos] = old_sum;
                nd.children.insert(pos + 1, new_node);
                nd.counts.insert(pos + 1, new_sum);
                if nd.children.len() > NODE_CAP {
                    self.split_node(p);
                }
            }
        }
    }

    /// Recomputes every cached count bottom-up and compares with the cache.
    pub fn check_counts(&self) -> bool {
        fn visit(tree: &SeqTree, node: NodeId) -> Option<Counts> {
            let nd = &tree.nodes[node];
            let mut sum = Counts::default();
            for (k, &c) in nd.children.iter().enumerate() {
                let sub = if nd.leaf_children {
                    if tree.leaves[c].parent != node {
                        return None;
                    }
                    Counts::of(&tree.leaves[c].records)
                } else {
                    if tree.nodes[c].parent != Some(node) {
                        return None;
                    }
                    visit(tree, c)?
                };
                if sub != nd.counts[k] {
                    return None;
                }
                sum.add(sub);
            }
            Some(sum)
        }
        visit(self, self.root) == Some(self.total) && self.iter().count() == self.records
    }
}
