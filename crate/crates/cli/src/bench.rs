use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{bail, Result};
use egwalker::{merge_new, replay_cost_profile, replay_document, Counters, Document, Event, EventGraph};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::input;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Replay,
    MergeSplit,
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub min: f64,
    pub mean: f64,
}

impl Timing {
    fn of(samples: &[Duration]) -> Self {
        let ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        Timing { min: ms.iter().copied().fold(f64::INFINITY, f64::min), mean: ms.iter().sum::<f64>() / ms.len() as f64 }
    }
}

#[derive(Debug, Serialize)]
pub struct Phases {
    pub ingest: Timing,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replay: Option<Timing>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merge: Option<Timing>,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub trace: String,
    pub mode: &'static str,
    pub iters: usize,
    pub events: usize,
    pub ops: usize,
    pub timings_ms: Phases,
    pub counters: Counters,
    pub peak_records: u64,
    pub output_hash: String,
}

pub fn hash(doc: &Document) -> String {
    Sha256::digest(doc.snapshot_text()).iter().map(|b| format!("{b:02x}")).collect()
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

pub fn run(path: &Path, iters: usize, mode: Mode, split: f64) -> Result<BenchReport> {
    if iters == 0 {
        bail!("--iters must be at least 1");
    }
    if !(0.0..=1.0).contains(&split) {
        bail!("--split must be between 0 and 1");
    }
    let bytes = input::read(path)?;
    let mut ingest = Vec::with_capacity(iters);
    let mut graph = EventGraph::new();
    for _ in 0..iters {
        let (loaded, t) = timed(|| input::parse(&bytes, path));
        graph = loaded?.graph;
        ingest.push(t);
    }
    let counters = replay_cost_profile(&graph)?;
    let expected = hash(&replay_document(&graph)?);

    let mut samples = Vec::with_capacity(iters);
    let mut ops = 0;
    for _ in 0..iters {
        let (doc, t) = match mode {
            Mode::Replay => {
                let (doc, t) = timed(|| replay_document(&graph));
                ops = graph.len();
                (doc?, t)
            }
            Mode::MergeSplit => {
                let cut = (graph.len() as f64 * split).round() as usize;
                let mut head = EventGraph::new();
                for i in 0..cut {
                    head.add_event(graph.event(i))?;
                }
                let mut doc = replay_document(&head)?;
                let current = head.version().clone();
                let tail: Vec<Event> = (cut..graph.len()).map(|i| graph.event(i)).collect();
                let (out, t) = timed(|| merge_new(&mut head, &current, &mut doc, tail));
                ops = out?.ops.len();
                (doc, t)
            }
        };
        if hash(&doc) != expected {
            bail!("benchmarked document differs from a full replay");
        }
        samples.push(t);
    }

    let timing = Some(Timing::of(&samples));
    let (replay, merge) = match mode {
        Mode::Replay => (timing, None),
        Mode::MergeSplit => (None, timing),
    };
    Ok(BenchReport {
        trace: path.display().to_string(),
        mode: match mode {
            Mode::Replay => "replay",
            Mode::MergeSplit => "merge-split",
        },
        iters,
        events: graph.len(),
        ops,
        timings_ms: Phases { ingest: Timing::of(&ingest), replay, merge },
        peak_records: counters.peak_records,
        counters,
        output_hash: expected,
    })
}
