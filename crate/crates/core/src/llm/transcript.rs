use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GatewayError;
use crate::fsutil;

/// One recorded exchange. Stored as a JSON Lines record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub digest: String,
    pub response: String,
    pub latency_ms: u64,
}

/// Append-only log of recorded responses, looked up by request digest.
///
/// When a digest was recorded more than once the first response wins, so
/// repeated replays of the same transcript are stable.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
    first_by_digest: HashMap<String, usize>,
}

impl Transcript {
    pub fn push(&mut self, entry: TranscriptEntry) {
        self.first_by_digest
            .entry(entry.digest.clone())
            .or_insert(self.entries.len());
        self.entries.push(entry);
    }

    pub fn get(&self, digest: &str) -> Option<&TranscriptEntry> {
        self.first_by_digest.get(digest).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, GatewayError> {
        let mut t = Transcript::default();
        for (i, line) in reader.lines().enumerate() {
            let line =
                line.map_err(|e| GatewayError::Transcript(format!("line {}: {e}", i + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line)
                .map_err(|e| GatewayError::Transcript(format!("line {}: {e}", i + 1)))?;
            t.push(entry);
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| GatewayError::Transcript(format!("{}: {e}", path.display())))?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("transcript entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GatewayError> {
        let path = path.as_ref();
        fsutil::write_atomic(path, self.to_jsonl().as_bytes())
            .map_err(|e| GatewayError::Transcript(format!("{}: {e}", path.display())))
    }
}
