//! Request/response cassettes for testing the chat backend without a live
//! endpoint. One JSON object per line, keyed by a hash of the request body.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::sha256_hex;

use super::AgentError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    /// Hash of the canonical request JSON.
    pub key: String,
    /// Full request body, kept for audit and re-recording.
    pub request: serde_json::Value,
    /// Assistant text returned for this request.
    pub response: String,
}

/// On-disk store of recorded exchanges. Appends are flushed immediately so a
/// crashed recording session keeps everything already answered.
#[derive(Debug)]
pub struct Cassette {
    path: PathBuf,
    entries: BTreeMap<String, CassetteEntry>,
}

impl Cassette {
    /// Open a cassette; a missing file is an empty cassette (fresh recording).
    pub fn load(path: &Path) -> Result<Cassette, AgentError> {
        let mut entries = BTreeMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path)
                .map_err(|e| AgentError::Cassette(format!("{}: {e}", path.display())))?;
            for (idx, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CassetteEntry = serde_json::from_str(line).map_err(|e| {
                    AgentError::Cassette(format!("{} line {}: {e}", path.display(), idx + 1))
                })?;
                entries.insert(entry.key.clone(), entry);
            }
        }
        Ok(Cassette {
            path: path.to_path_buf(),
            entries,
        })
    }

    /// Key for a request body: hash of its compact JSON serialization.
    /// Object keys serialize sorted, so semantically equal requests collide.
    pub fn request_key(request: &serde_json::Value) -> String {
        let canonical = serde_json::to_string(request).expect("request serializes");
        sha256_hex(canonical.as_bytes())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.response.as_str())
    }

    /// Record one exchange: append to the file, then index it.
    pub fn record(&mut self, entry: CassetteEntry) -> Result<(), AgentError> {
        let line = serde_json::to_string(&entry)
            .map_err(|e| AgentError::Cassette(format!("serialize entry: {e}")))?;
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| AgentError::Cassette(format!("{}: {e}", self.path.display())))?;
        writeln!(file, "{line}")
            .map_err(|e| AgentError::Cassette(format!("{}: {e}", self.path.display())))?;
        self.entries.insert(entry.key.clone(), entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
