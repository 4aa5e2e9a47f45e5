use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use egwalker::storage::{self, DecodeOptions, Snapshot};
use egwalker::{Document, Event, EventGraph};

pub struct Loaded {
    pub graph: EventGraph,
    pub snapshot: Option<Snapshot>,
}

impl Loaded {
    /// The document at the graph's version, from the snapshot when it has one.
    pub fn document(&self) -> Result<Document> {
        match &self.snapshot {
            Some(s) if s.version == *self.graph.version() => Ok(s.document.clone()),
            _ => Ok(egwalker::replay_document(&self.graph)?),
        }
    }
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn is_binary(bytes: &[u8]) -> bool {
    bytes.starts_with(storage::MAGIC)
}

/// Parses a `.egwk` file or a JSON trace. Binary files with a snapshot are
/// loaded without replaying.
pub fn parse(bytes: &[u8], name: &Path) -> Result<Loaded> {
    if is_binary(bytes) {
        let d = storage::decode_with(bytes, DecodeOptions::default())
            .with_context(|| format!("decoding {}", name.display()))?;
        if d.snapshot.is_none() {
            // No snapshot to trust, so check every index by replaying.
            egwalker::replay_all(&d.graph).with_context(|| format!("validating {}", name.display()))?;
        }
        Ok(Loaded { graph: d.graph, snapshot: d.snapshot })
    } else {
        let text = std::str::from_utf8(bytes)
            .with_context(|| format!("{} is neither .egwk nor UTF-8 JSON", name.display()))?;
        let graph = storage::import_json(text).with_context(|| format!("importing {}", name.display()))?;
        Ok(Loaded { graph, snapshot: None })
    }
}

pub fn load(path: &Path) -> Result<Loaded> {
    parse(&read(path)?, path)
}

/// Events of a file for merging elsewhere. Binary frames may have parents
/// outside the file.
pub fn load_events(path: &Path) -> Result<Vec<Event>> {
    let bytes = read(path)?;
    if is_binary(&bytes) {
        return storage::decode_events(&bytes).with_context(|| format!("decoding {}", path.display()));
    }
    let g = parse(&bytes, path)?.graph;
    Ok((0..g.len()).map(|i| g.event(i)).collect())
}
