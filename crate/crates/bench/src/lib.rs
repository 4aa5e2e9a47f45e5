//! Fixtures shared by the benchmarks.

use egwalker::oracle::{self, FuzzConfig};
use egwalker::{synth, EventGraph, LocalIdx};

/// Named graphs covering the shapes that matter for replay cost: one long
/// sequential edit, two long concurrent branches, and a dense fuzz graph.
pub fn traces() -> Vec<(&'static str, EventGraph)> {
    vec![
        ("sequential-20k", synth::sequential_trace(20_000, 1)),
        ("two-branch-2x10k", synth::two_branch(10_000, 10_000, 2)),
        ("fuzz-2k", oracle::generate(3, &FuzzConfig { max_events: 2_000, concurrency: 0.5, ..FuzzConfig::default() })),
    ]
}

/// Splits a two-branch graph into the events known locally (prefix and the
/// first branch) and the rest.
pub fn branch_split(k: usize, m: usize, seed: u64) -> (EventGraph, Vec<LocalIdx>) {
    let g = synth::two_branch(k, m, seed);
    let tail = (20 + k..g.len()).collect();
    (g, tail)
}
