//! Synthetic editing traces shaped like someone typing: mostly appends at a
//! cursor, some backspacing, occasional jumps elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::causal_graph::{EventGraph, LocalIdx, Operation};

const TEXT: &[u8] = b"the quick brown fox jumps over the lazy dog ";

/// Appends a chain of `n` events by `agent` after `parents`, editing a
/// document that is `len` characters long at that point. Returns the last
/// event and the resulting length.
fn type_chain(
    graph: &mut EventGraph,
    rng: &mut ChaCha8Rng,
    agent: &str,
    parents: &[LocalIdx],
    mut len: usize,
    n: usize,
) -> (Option<LocalIdx>, usize) {
    let mut last: Vec<LocalIdx> = parents.to_vec();
    let mut cursor = len;
    for _ in 0..n {
        let roll: f64 = rng.gen();
        if roll < 0.02 {
            cursor = rng.gen_range(0..=len);
        }
        let op = if len > 0 && cursor > 0 && roll > 0.9 {
            cursor -= 1;
            len -= 1;
            Operation::Delete { pos: cursor }
        } else {
            let content = TEXT[rng.gen_range(0..TEXT.len())] as char;
            cursor += 1;
            len += 1;
            Operation::Insert { pos: cursor - 1, content }
        };
        let idx = graph.push(agent, &last, op).expect("chain events are valid");
        last = vec![idx];
    }
    (last.first().copied(), len)
}

/// One author, `n` events, no concurrency at all.
pub fn sequential_trace(n: usize, seed: u64) -> EventGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = EventGraph::new();
    type_chain(&mut graph, &mut rng, "A", &[], 0, n);
    graph
}

/// A short shared prefix, then two authors editing concurrently for `k` and
/// `m` events, then one event merging both branches.
pub fn two_branch(k: usize, m: usize, seed: u64) -> EventGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = EventGraph::new();
    let (base, len) = type_chain(&mut graph, &mut rng, "A", &[], 0, 20);
    let base: Vec<LocalIdx> = base.into_iter().collect();
    let (a, len_a) = type_chain(&mut graph, &mut rng, "A", &base, len, k);
    let (b, len_b) = type_chain(&mut graph, &mut rng, "B", &base, len, m);
    let tips: Vec<LocalIdx> = a.into_iter().chain(b).collect();
    let merged_len = len_a + len_b - len;
    graph.push("C", &tips, Operation::Insert { pos: merged_len, content: '\n' }).expect("merge event is valid");
    graph
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal_graph::Frontier;

    #[test]
    fn sequential_is_one_chain() {
        let g = sequential_trace(500, 3);
        assert_eq!(g.len(), 500);
        assert!(g.critical_cuts().iter().all(|&c| c));
        assert_eq!(*g.version(), Frontier::single(499));
    }

    #[test]
    fn two_branch_shape() {
        let g = two_branch(30, 40, 1);
        assert_eq!(g.len(), 20 + 30 + 40 + 1);
        assert_eq!(g.parents(g.len() - 1).len(), 2);
        let doc = crate::replay::replay_document(&g).unwrap();
        assert!(doc.to_string().ends_with('\n'));
    }
}
