use std::collections::BTreeSet;

use egwalker::internal_state::PrepareState;
use egwalker::oracle::{self, brute_is_critical, Ancestry, FuzzConfig};
use egwalker::replay::replay_state;
use egwalker::storage::{self, DecodeOptions};
use egwalker::{
    checkout, merge_new, replay_document, replay_with, EventGraph, Frontier, LocalIdx, Operation, ReplayOptions,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn graph_config() -> impl Strategy<Value = FuzzConfig> {
    (1usize..=60, 1usize..=4, 0.0f64..0.8, 0.0f64..0.6).prop_map(|(max_events, agents, concurrency, delete_ratio)| {
        FuzzConfig { max_events, agents, concurrency, delete_ratio }
    })
}

fn random_version(g: &EventGraph, rng: &mut ChaCha8Rng) -> Frontier {
    if g.is_empty() || rng.gen_bool(0.1) {
        return Frontier::root();
    }
    let picks: Vec<LocalIdx> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..g.len())).collect();
    g.reduce(&picks)
}

fn set_of(flags: &[bool]) -> BTreeSet<LocalIdx> {
    flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect()
}

/// The subgraph `Events(v)`, rebuilt with the same ids.
fn subgraph(g: &EventGraph, v: &Frontier) -> EventGraph {
    let mut sub = EventGraph::new();
    for e in g.events_of(v).unwrap() {
        sub.add_event(g.event(e)).unwrap();
    }
    sub
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn diff_matches_ancestor_sets(seed in any::<u64>(), cfg in graph_config()) {
        let g = oracle::generate(seed, &cfg);
        let anc = Ancestry::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let a = random_version(&g, &mut rng);
            let b = random_version(&g, &mut rng);
            let ea = set_of(&anc.events_of(g.len(), a.as_slice()));
            let eb = set_of(&anc.events_of(g.len(), b.as_slice()));
            let (only_a, only_b) = g.diff(&a, &b).unwrap();
            prop_assert!(only_a.windows(2).all(|w| w[0] > w[1]));
            prop_assert!(only_b.windows(2).all(|w| w[0] > w[1]));
            prop_assert_eq!(only_a.into_iter().collect::<BTreeSet<_>>(), &ea - &eb);
            prop_assert_eq!(only_b.into_iter().collect::<BTreeSet<_>>(), &eb - &ea);
            prop_assert_eq!(g.events_of(&a).unwrap().into_iter().collect::<BTreeSet<_>>(), ea);
        }
    }

    #[test]
    fn critical_versions_match_the_definition(seed in any::<u64>(), cfg in graph_config()) {
        let g = oracle::generate(seed, &cfg);
        let anc = Ancestry::new(&g);
        for e in 0..g.len() {
            let v = Frontier::single(e);
            prop_assert_eq!(g.is_critical(&v).unwrap(), brute_is_critical(&g, &anc, &v), "event {}", e);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let v = random_version(&g, &mut rng);
            prop_assert_eq!(g.is_critical(&v).unwrap(), brute_is_critical(&g, &anc, &v));
        }
        for v in g.find_critical_versions() {
            prop_assert!(brute_is_critical(&g, &anc, &v));
        }
        prop_assert!(g.is_critical(&Frontier::root()).unwrap());
    }

    #[test]
    fn sorts_are_topological_and_complete(seed in any::<u64>(), cfg in graph_config()) {
        let g = oracle::generate(seed, &cfg);
        let anc = Ancestry::new(&g);
        let all: Vec<LocalIdx> = (0..g.len()).collect();
        let order = g.sort_topological(&Frontier::root(), g.version()).unwrap();
        g.check_order(&all, &order).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.check_order(&all, &g.random_topological_order(&mut rng)).unwrap();

        let to = random_version(&g, &mut rng);
        let from = g.reduce(&to.iter().flat_map(|t| g.parents(t).to_vec()).collect::<Vec<_>>());
        let part = g.sort_topological(&from, &to).unwrap();
        let expected = &set_of(&anc.events_of(g.len(), to.as_slice())) - &set_of(&anc.events_of(g.len(), from.as_slice()));
        prop_assert_eq!(part.iter().copied().collect::<BTreeSet<_>>(), expected.clone());
        g.check_order(&expected.into_iter().collect::<Vec<_>>(), &part).unwrap();
    }

    #[test]
    fn prepare_states_follow_the_prepare_version(seed in any::<u64>(), cfg in graph_config()) {
        let g = oracle::generate(seed, &cfg);
        let anc = Ancestry::new(&g);
        let (_, mut state) = replay_state(&g, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let v = random_version(&g, &mut rng);
            state.set_prepare_version(v.as_slice()).unwrap();
            let inside = anc.events_of(g.len(), v.as_slice());
            for (c, sp, _) in state.char_states() {
                let deletes = (0..g.len()).filter(|&d| inside[d] && state.delete_target(d) == Some(c)).count();
                let expected = if !inside[c] {
                    PrepareState::NotInsertedYet
                } else if deletes > 0 {
                    PrepareState::Del(deletes as u32)
                } else {
                    PrepareState::Ins
                };
                prop_assert_eq!(sp, expected, "char {} at {:?}", c, v);
            }
        }
    }

    #[test]
    fn checkout_matches_the_oracle_on_the_subgraph(seed in any::<u64>(), cfg in graph_config()) {
        let g = oracle::generate(seed, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..3 {
            let v = random_version(&g, &mut rng);
            let expected = oracle::oracle_replay(&subgraph(&g, &v)).unwrap().text;
            prop_assert_eq!(checkout(&g, &v).unwrap().to_string(), expected);
        }
    }

    #[test]
    fn optimisations_do_not_change_ops(seed in any::<u64>(), cfg in graph_config()) {
        let g = oracle::generate(seed, &cfg);
        let base = replay_with(&g, ReplayOptions { clear: false, fast_path: false }, None).unwrap().ops;
        for (clear, fast_path) in [(true, true), (true, false), (false, true)] {
            prop_assert_eq!(&replay_with(&g, ReplayOptions { clear, fast_path }, None).unwrap().ops, &base);
        }
    }

    #[test]
    fn binary_roundtrip(seed in any::<u64>(), cfg in graph_config()) {
        let g = oracle::generate(seed, &cfg);
        let doc = replay_document(&g).unwrap();
        let bytes = storage::encode(&g, Some(&doc));
        let back = storage::decode_with(&bytes, DecodeOptions::verified()).unwrap();
        prop_assert!((0..g.len()).all(|i| back.graph.event(i) == g.event(i)));
        prop_assert_eq!(&back.snapshot.unwrap().document, &doc);
        prop_assert_eq!(storage::encode(&back.graph, Some(&doc)), bytes);
    }

    #[test]
    fn subset_frames_merge_back(seed in any::<u64>(), cfg in graph_config()) {
        let g = oracle::generate(seed, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = random_version(&g, &mut rng);
        let known = g.events_of(&head).unwrap();
        let rest: Vec<LocalIdx> = (0..g.len()).filter(|e| known.binary_search(e).is_err()).collect();
        let frame = storage::encode_subset(&g, &rest);
        let mut local = subgraph(&g, &head);
        let mut doc = replay_document(&local).unwrap();
        let current = local.version().clone();
        merge_new(&mut local, &current, &mut doc, storage::decode_events(&frame).unwrap()).unwrap();
        prop_assert_eq!(doc, replay_document(&g).unwrap());
    }

    #[test]
    fn trace_json_roundtrip(seed in any::<u64>(), cfg in graph_config(), coalesce in any::<bool>()) {
        let g = oracle::generate(seed, &cfg);
        let json = serde_json::to_string(&storage::export_trace(&g, coalesce)).unwrap();
        let back = storage::import_json(&json).unwrap();
        prop_assert!((0..g.len()).all(|i| back.event(i) == g.event(i)));
    }

    #[test]
    fn decoding_garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let mut framed = b"EGWK\x01".to_vec();
        framed.extend(&bytes);
        let _ = storage::decode(&framed);
        let _ = storage::decode_events(&framed);
    }
}

#[test]
fn bit_flips_are_rejected_or_decode_validly() {
    let g = oracle::generate(5, &FuzzConfig { max_events: 40, ..FuzzConfig::default() });
    let bytes = storage::encode(&g, None);
    for i in 5..bytes.len() {
        for bit in 0..8 {
            let mut corrupt = bytes.clone();
            corrupt[i] ^= 1 << bit;
            if let Ok(d) = storage::decode(&corrupt) {
                // Whatever survives validation must replay.
                replay_document(&d.graph).unwrap();
            }
        }
    }
}

#[test]
fn multi_root_graphs_are_generated() {
    let cfg = FuzzConfig { concurrency: 0.9, ..FuzzConfig::default() };
    let roots = (0..50).filter(|&s| {
        let g = oracle::generate(s, &cfg);
        (0..g.len()).filter(|&e| g.parents(e).is_empty()).count() > 1
    });
    assert!(roots.count() > 0);
    let g = oracle::generate(1, &cfg);
    assert!((0..g.len()).any(|e| matches!(g.op(e), Operation::Delete { .. })));
}
