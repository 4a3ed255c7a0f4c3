//! JSON Lines checkpoint: a header line, then one completed work item per line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::free_energy::ReplicaResult;

pub const FILE_NAME: &str = "checkpoint.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    digest: String,
    n_items: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Line {
    item: usize,
    result: ReplicaResult,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint digest {found} does not match config digest {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("corrupt checkpoint line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Completed items of an earlier run, or nothing if no checkpoint exists.
pub fn load(dir: &Path, digest: &str, n_items: usize) -> Result<BTreeMap<usize, ReplicaResult>, CheckpointError> {
    let path = dir.join(FILE_NAME);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let mut lines = BufReader::new(File::open(&path)?).lines();
    let Some(first) = lines.next() else {
        return Ok(BTreeMap::new());
    };
    let header: Header = serde_json::from_str(&first?).map_err(|e| CheckpointError::Corrupt { line: 1, message: e.to_string() })?;
    if header.digest != digest || header.n_items != n_items {
        return Err(CheckpointError::DigestMismatch { expected: digest.into(), found: header.digest });
    }
    let mut done = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn final line from an interrupted write is dropped and recomputed.
        match serde_json::from_str::<Line>(&line) {
            Ok(l) if l.item < n_items => {
                done.insert(l.item, l.result);
            }
            Ok(l) => return Err(CheckpointError::Corrupt { line: i + 2, message: format!("item {} out of range", l.item) }),
            Err(_) => break,
        }
    }
    Ok(done)
}

/// Append-only writer.
pub struct Writer {
    out: BufWriter<File>,
}

impl Writer {
    /// Starts a new checkpoint, or rewrites `done` into a fresh file so that a
    /// torn tail is discarded.
    pub fn create(dir: &Path, digest: &str, n_items: usize, done: &BTreeMap<usize, ReplicaResult>) -> std::io::Result<Self> {
        let path: PathBuf = dir.join(FILE_NAME);
        let tmp = dir.join(format!("{FILE_NAME}.tmp"));
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(&mut w, &Header { digest: digest.into(), n_items })?;
            w.write_all(b"\n")?;
            for (&item, result) in done {
                serde_json::to_writer(&mut w, &Line { item, result: result.clone() })?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, &path)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn append(&mut self, item: usize, result: &ReplicaResult) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, &Line { item, result: result.clone() })?;
        self.out.write_all(b"\n")
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()?;
        self.out.get_ref().sync_data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(r: u64) -> ReplicaResult {
        ReplicaResult { group: 0, replica: r, log_z: vec![vec![0.1 * r as f64, 1.0 / 3.0]], boundary_mass: vec![vec![0.0, 1e-300]], ess: vec![] }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = Writer::create(dir.path(), "abc", 4, &BTreeMap::new()).unwrap();
        w.append(2, &result(2)).unwrap();
        w.append(0, &result(0)).unwrap();
        w.flush().unwrap();
        let done = load(dir.path(), "abc", 4).unwrap();
        assert_eq!(done.len(), 2);
        assert_eq!(done[&2], result(2));
        assert!(matches!(load(dir.path(), "abd", 4), Err(CheckpointError::DigestMismatch { .. })));
    }

    #[test]
    fn torn_tail_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = Writer::create(dir.path(), "abc", 4, &BTreeMap::new()).unwrap();
        w.append(1, &result(1)).unwrap();
        w.flush().unwrap();
        drop(w);
        let mut f = OpenOptions::new().append(true).open(dir.path().join(FILE_NAME)).unwrap();
        f.write_all(b"{\"item\":3,\"res").unwrap();
        let done = load(dir.path(), "abc", 4).unwrap();
        assert_eq!(done.keys().copied().collect::<Vec<_>>(), vec![1]);
    }
}
