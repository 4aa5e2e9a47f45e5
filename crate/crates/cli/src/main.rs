use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use egwalker::internal_state::set_inverted_tie_break;
use egwalker::oracle::{self, Checks, FuzzConfig};
use egwalker::storage;
use egwalker::{checkout, merge_new, replay_with, synth, Document, EventId, ReplayOptions};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

mod bench;
mod input;

#[derive(Parser)]
#[command(name = "egwalker", version, about = "Replay, merge and inspect collaborative editing traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Egwk,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Shape {
    Sequential,
    TwoBranch,
    Fuzz,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a trace and print the final document.
    Replay {
        input: PathBuf,
        /// Keep the full internal state instead of clearing it at critical versions.
        #[arg(long)]
        no_clear: bool,
        /// Replay in a random topological order drawn from this seed.
        #[arg(long)]
        order_seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Merge the events of `incoming` into `base` and write the result.
    Merge {
        base: PathBuf,
        incoming: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the document at a past version.
    Checkout {
        input: PathBuf,
        /// Comma-separated event ids, e.g. "A@3,B@7". Empty for the empty document.
        #[arg(long = "version")]
        at: String,
    },
    /// Convert between .egwk and JSON traces.
    Convert {
        input: PathBuf,
        #[arg(long, value_enum)]
        to: Format,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Store the replayed document so loading can skip replay (.egwk only).
        #[arg(long)]
        snapshot: bool,
        /// Write one JSON op per event instead of merging typing runs.
        #[arg(long)]
        no_coalesce: bool,
    },
    /// Print trace statistics.
    Stats {
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Differential fuzzing against the reference implementations.
    Fuzz {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: u64,
        #[arg(long, default_value_t = 100)]
        max_events: usize,
        #[arg(long, default_value_t = 4)]
        agents: usize,
        #[arg(long, default_value_t = 0.3)]
        concurrency: f64,
        #[arg(long, default_value_t = 0.3)]
        delete_ratio: f64,
        #[arg(long)]
        threads: Option<usize>,
        /// Flip the concurrent-insert tie break, to check the fuzzer notices.
        #[arg(long, hide = true)]
        invert_tie_break: bool,
    },
    /// Time replay or merge of a trace.
    Bench {
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, value_enum, default_value_t = bench::Mode::Replay)]
        mode: bench::Mode,
        /// Fraction of events already present before the merge (merge-split mode).
        #[arg(long, default_value_t = 0.5)]
        split: f64,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic trace.
    Generate {
        #[arg(value_enum)]
        shape: Shape,
        /// Events for sequential, events per branch for two-branch, maximum for fuzz.
        #[arg(long, default_value_t = 10_000)]
        events: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Egwk)]
        to: Format,
    },
}

/// Exit status for a run that found a property violation.
struct Violation;

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn print_doc(doc: &Document) -> Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(&doc.snapshot_text())?;
    out.flush()?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).with_context(|| format!("writing {}", path.display())),
        None => {
            io::stdout().lock().write_all(bytes)?;
            Ok(())
        }
    }
}

fn encode_as(graph: &egwalker::EventGraph, to: Format, snapshot: bool, coalesce: bool) -> Result<Vec<u8>> {
    Ok(match to {
        Format::Egwk => {
            let doc = if snapshot { Some(egwalker::replay_document(graph)?) } else { None };
            storage::encode(graph, doc.as_ref())
        }
        Format::Json => {
            let mut json = serde_json::to_vec_pretty(&storage::export_trace(graph, coalesce))?;
            json.push(b'\n');
            json
        }
    })
}

#[derive(Serialize)]
struct ReplayTimings {
    load: f64,
    replay: f64,
}

#[derive(Serialize)]
struct ReplayReport {
    doc: String,
    events: usize,
    ops: usize,
    timings_ms: ReplayTimings,
    counters: egwalker::Counters,
}

fn cmd_replay(path: &Path, no_clear: bool, order_seed: Option<u64>, json: bool) -> Result<()> {
    let start = Instant::now();
    let graph = input::load(path)?.graph;
    let load = ms(start);
    let start = Instant::now();
    let order = order_seed.map(|s| graph.random_topological_order(&mut ChaCha8Rng::seed_from_u64(s)));
    let options = ReplayOptions { clear: !no_clear, ..ReplayOptions::default() };
    let out = replay_with(&graph, options, order.as_deref())?;
    let mut doc = Document::new();
    doc.apply_all(&out.ops)?;
    let replay = ms(start);
    if json {
        print_json(&ReplayReport {
            doc: doc.to_string(),
            events: graph.len(),
            ops: out.ops.len(),
            timings_ms: ReplayTimings { load, replay },
            counters: out.counters,
        })
    } else {
        print_doc(&doc)
    }
}

fn cmd_merge(base: &Path, incoming: &Path, out: &Path) -> Result<()> {
    let loaded = input::load(base)?;
    let mut doc = loaded.document()?;
    let mut graph = loaded.graph;
    let events = input::load_events(incoming)?;

    let arriving: HashSet<&EventId> = events.iter().map(|e| &e.id).collect();
    let mut missing: Vec<String> = events
        .iter()
        .flat_map(|e| &e.parents)
        .filter(|p| !arriving.contains(p) && graph.idx_of(p).is_none())
        .map(|p| p.to_string())
        .collect();
    missing.sort();
    missing.dedup();
    if !missing.is_empty() {
        bail!("missing parent events: {}", missing.join(", "));
    }

    let current = graph.version().clone();
    let count = events.len();
    let merged = merge_new(&mut graph, &current, &mut doc, events)?;
    fs::write(out, storage::encode(&graph, Some(&doc))).with_context(|| format!("writing {}", out.display()))?;
    println!("merged {count} events, {} transformed ops, {} events total", merged.ops.len(), graph.len());
    Ok(())
}

fn parse_version(list: &str) -> Result<Vec<EventId>> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| s.parse::<EventId>().map_err(Into::into)).collect()
}

fn cmd_checkout(path: &Path, at: &str) -> Result<()> {
    let graph = input::load(path)?.graph;
    let v = graph.frontier_from_ids(&parse_version(at)?)?;
    print_doc(&checkout(&graph, &v)?)
}

fn cmd_stats(path: &Path, json: bool) -> Result<()> {
    let s = storage::stats(&input::load(path)?.graph)?;
    if json {
        return print_json(&s);
    }
    println!("events            {}", s.events);
    println!("authors           {}", s.authors);
    println!("runs              {}", s.runs);
    println!("inserted chars    {}", s.inserted);
    println!("chars remaining   {:.1}%", s.chars_remaining_pct);
    println!("final size        {} bytes", s.final_size_bytes);
    println!("avg concurrency   {:.3} (proxy)", s.avg_concurrency);
    Ok(())
}

fn cmd_fuzz(
    seed: u64,
    count: u64,
    cfg: FuzzConfig,
    threads: Option<usize>,
    invert: bool,
) -> Result<Result<(), Violation>> {
    if !(0.0..=1.0).contains(&cfg.concurrency) || !(0.0..=1.0).contains(&cfg.delete_ratio) {
        bail!("--concurrency and --delete-ratio must be between 0 and 1");
    }
    let threads = threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, count.max(1) as usize);
    let start = Instant::now();
    let first_failure = AtomicU64::new(u64::MAX);
    let failures: Vec<(u64, String)> = std::thread::scope(|scope| {
        let workers: Vec<_> = (0..threads as u64)
            .map(|t| {
                let first_failure = &first_failure;
                scope.spawn(move || {
                    set_inverted_tie_break(invert);
                    let mut found = Vec::new();
                    let mut s = seed + t;
                    while s < seed + count && s < first_failure.load(Ordering::Relaxed) {
                        let g = oracle::generate(s, &cfg);
                        if let Err(e) = oracle::check_graph(&g, s, Checks::default()) {
                            first_failure.fetch_min(s, Ordering::Relaxed);
                            found.push((s, e.to_string()));
                            break;
                        }
                        s += threads as u64;
                    }
                    found
                })
            })
            .collect();
        workers.into_iter().flat_map(|w| w.join().expect("fuzz worker panicked")).collect()
    });
    match failures.into_iter().min_by_key(|f| f.0) {
        Some((s, e)) => {
            println!("FAIL seed {s}: {e}");
            println!("reproduce with: egwalker fuzz --seed {s} --count 1 --max-events {}", cfg.max_events);
            Ok(Err(Violation))
        }
        None => {
            println!(
                "ok: {count} graphs (seeds {seed}..{}), up to {} events, {:.1}s",
                seed + count,
                cfg.max_events,
                start.elapsed().as_secs_f64()
            );
            Ok(Ok(()))
        }
    }
}

fn cmd_bench(path: &Path, iters: usize, mode: bench::Mode, split: f64, json: bool) -> Result<()> {
    let r = bench::run(path, iters, mode, split)?;
    if json {
        return print_json(&r);
    }
    println!("trace          {}", r.trace);
    println!("mode           {} x{}", r.mode, r.iters);
    println!("events         {}", r.events);
    println!("ingest         min {:.2} ms, mean {:.2} ms", r.timings_ms.ingest.min, r.timings_ms.ingest.mean);
    if let Some(t) = &r.timings_ms.replay {
        println!("replay         min {:.2} ms, mean {:.2} ms", t.min, t.mean);
    }
    if let Some(t) = &r.timings_ms.merge {
        println!("merge          min {:.2} ms, mean {:.2} ms ({} ops)", t.min, t.mean, r.ops);
    }
    let c = &r.counters;
    println!(
        "counters       applies {} retreats {} advances {} fast-path {} clears {}",
        c.applies, c.retreats, c.advances, c.fast_path, c.clears
    );
    println!("peak records   {}", r.peak_records);
    println!("output sha256  {}", r.output_hash);
    Ok(())
}

fn cmd_generate(shape: Shape, events: usize, seed: u64, out: &Path, to: Format) -> Result<()> {
    let graph = match shape {
        Shape::Sequential => synth::sequential_trace(events, seed),
        Shape::TwoBranch => synth::two_branch(events, events, seed),
        Shape::Fuzz => oracle::generate(seed, &FuzzConfig { max_events: events, ..FuzzConfig::default() }),
    };
    write_output(Some(out), &encode_as(&graph, to, false, true)?)?;
    println!("wrote {} events to {}", graph.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<Result<(), Violation>> {
    match cli.command {
        Command::Replay { input, no_clear, order_seed, json } => cmd_replay(&input, no_clear, order_seed, json)?,
        Command::Merge { base, incoming, out } => cmd_merge(&base, &incoming, &out)?,
        Command::Checkout { input, at } => cmd_checkout(&input, &at)?,
        Command::Convert { input, to, out, snapshot, no_coalesce } => {
            let graph = input::load(&input)?.graph;
            write_output(out.as_deref(), &encode_as(&graph, to, snapshot, !no_coalesce)?)?;
        }
        Command::Stats { input, json } => cmd_stats(&input, json)?,
        Command::Fuzz { seed, count, max_events, agents, concurrency, delete_ratio, threads, invert_tie_break } => {
            let cfg = FuzzConfig { max_events, agents, concurrency, delete_ratio };
            return cmd_fuzz(seed, count, cfg, threads, invert_tie_break);
        }
        Command::Bench { input, iters, mode, split, json } => cmd_bench(&input, iters, mode, split, json)?,
        Command::Generate { shape, events, seed, out, to } => cmd_generate(shape, events, seed, &out, to)?,
    }
    Ok(Ok(()))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Violation)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
