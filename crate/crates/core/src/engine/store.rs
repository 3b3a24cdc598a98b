//! On-disk transcript store.
//!
//! Layout under the store directory:
//!
//! ```text
//! config.json                      manifest: config snapshot + hashes
//! runs/{party}_{condition}_r{NN}.jsonl   one record per line, appended per round
//! networks/{party}_r{NN}.edges     Social-run wiring, one "i j" pair per line
//! ```
//!
//! Run files hold one block of `n_agents * rounds` records per question, in
//! config question order, round-major inside a block. Resume keeps the bytes
//! of complete leading blocks untouched and truncates everything after the
//! first incomplete or malformed line, so a finished store is byte-identical
//! whether produced in one pass or many. The manifest carries no timestamps
//! for the same reason.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Condition, EstimateRecord, ExperimentConfig, Party};
use crate::network::Network;

use super::EngineError;

pub const MANIFEST_FILE: &str = "config.json";
const SCHEMA_VERSION: u32 = 1;

/// Config snapshot stored alongside the records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreManifest {
    pub schema: u32,
    /// Content hash of `config`; resume refuses on mismatch.
    pub config_hash: String,
    /// Checksum of the question bank the store was written with.
    pub question_checksum: String,
    pub config: ExperimentConfig,
}

#[derive(Debug)]
pub struct TranscriptStore {
    dir: PathBuf,
}

impl TranscriptStore {
    /// Open an existing store or initialize an empty one. An existing
    /// manifest must match the requested config and question bank exactly.
    pub fn create_or_open(
        dir: &Path,
        config: &ExperimentConfig,
        question_checksum: &str,
    ) -> Result<TranscriptStore, EngineError> {
        let store = TranscriptStore {
            dir: dir.to_path_buf(),
        };
        if store.manifest_path().exists() {
            let manifest = store.read_manifest()?;
            let requested = config.content_hash();
            if manifest.config_hash != requested {
                return Err(EngineError::ConfigMismatch {
                    stored: manifest.config_hash,
                    requested,
                });
            }
            if manifest.question_checksum != question_checksum {
                return Err(EngineError::QuestionBankMismatch {
                    stored: manifest.question_checksum,
                    current: question_checksum.to_string(),
                });
            }
            return Ok(store);
        }
        std::fs::create_dir_all(store.runs_dir()).map_err(|e| store.io(&store.runs_dir(), e))?;
        std::fs::create_dir_all(store.networks_dir())
            .map_err(|e| store.io(&store.networks_dir(), e))?;
        let manifest = StoreManifest {
            schema: SCHEMA_VERSION,
            config_hash: config.content_hash(),
            question_checksum: question_checksum.to_string(),
            config: config.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(store.manifest_path(), text + "\n")
            .map_err(|e| store.io(&store.manifest_path(), e))?;
        Ok(store)
    }

    /// Open an existing store and return its manifest.
    pub fn open(dir: &Path) -> Result<(TranscriptStore, StoreManifest), EngineError> {
        let store = TranscriptStore {
            dir: dir.to_path_buf(),
        };
        if !store.manifest_path().exists() {
            return Err(EngineError::StoreMissing(dir.to_path_buf()));
        }
        let manifest = store.read_manifest()?;
        Ok((store, manifest))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn read_manifest(&self) -> Result<StoreManifest, EngineError> {
        let path = self.manifest_path();
        let text = std::fs::read_to_string(&path).map_err(|e| self.io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| EngineError::Corrupt {
            path,
            line: 0,
            message: e.to_string(),
        })
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    fn runs_dir(&self) -> PathBuf {
        self.dir.join("runs")
    }

    fn networks_dir(&self) -> PathBuf {
        self.dir.join("networks")
    }

    pub fn run_path(&self, party: Party, condition: Condition, run: u32) -> PathBuf {
        self.runs_dir()
            .join(format!("{party}_{condition}_r{run:02}.jsonl"))
    }

    fn abort_path(&self, party: Party, condition: Condition, run: u32) -> PathBuf {
        self.runs_dir()
            .join(format!("{party}_{condition}_r{run:02}.aborted"))
    }

    pub fn network_path(&self, party: Party, run: u32) -> PathBuf {
        self.networks_dir().join(format!("{party}_r{run:02}.edges"))
    }

    /// Append records to a run file and flush. Called once per round.
    pub fn append_records(
        &self,
        party: Party,
        condition: Condition,
        run: u32,
        records: &[EstimateRecord],
    ) -> Result<(), EngineError> {
        let path = self.run_path(party, condition, run);
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| self.io(&path, e))?;
        let mut buffer = String::new();
        for record in records {
            buffer.push_str(&serde_json::to_string(record).expect("record serializes"));
            buffer.push('\n');
        }
        file.write_all(buffer.as_bytes())
            .map_err(|e| self.io(&path, e))?;
        file.flush().map_err(|e| self.io(&path, e))?;
        Ok(())
    }

    /// Write a network dump, or verify an existing one against the derived
    /// wiring; drift means the store was produced by different code or seed.
    pub fn write_or_verify_network(
        &self,
        party: Party,
        run: u32,
        edges: &str,
    ) -> Result<(), EngineError> {
        let path = self.network_path(party, run);
        if path.exists() {
            let existing = std::fs::read_to_string(&path).map_err(|e| self.io(&path, e))?;
            if existing != edges {
                return Err(EngineError::NetworkDrift { path });
            }
            return Ok(());
        }
        std::fs::write(&path, edges).map_err(|e| self.io(&path, e))
    }

    /// Rebuild a network from its edge dump.
    pub fn read_network(&self, party: Party, run: u32, n: u32) -> Result<Network, EngineError> {
        let path = self.network_path(party, run);
        let text = std::fs::read_to_string(&path).map_err(|e| self.io(&path, e))?;
        let mut adjacency = vec![BTreeSet::new(); n as usize];
        for (idx, line) in text.lines().enumerate() {
            let corrupt = |message: &str| EngineError::Corrupt {
                path: path.clone(),
                line: idx + 1,
                message: message.to_string(),
            };
            let (a, b) = line.split_once(' ').ok_or_else(|| corrupt("expected 'i j'"))?;
            let a: u32 = a.parse().map_err(|_| corrupt("bad node id"))?;
            let b: u32 = b.parse().map_err(|_| corrupt("bad node id"))?;
            if a >= n || b >= n {
                return Err(corrupt("node id out of range"));
            }
            adjacency[a as usize].insert(b);
            adjacency[b as usize].insert(a);
        }
        Network::from_imported(adjacency).map_err(EngineError::Network)
    }

    /// Validate a run file for resume: parse complete leading question blocks
    /// (config question order, round-major), truncate the file after the last
    /// complete block, and return the kept blocks.
    pub fn prepare_run(
        &self,
        party: Party,
        condition: Condition,
        run: u32,
        config: &ExperimentConfig,
    ) -> Result<Vec<(u8, Vec<EstimateRecord>)>, EngineError> {
        let path = self.run_path(party, condition, run);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| self.io(&path, e))?;

        // (record, byte offset after its newline)
        let mut parsed: Vec<(EstimateRecord, usize)> = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let end = offset + line.len();
            if !line.ends_with('\n') {
                break;
            }
            match serde_json::from_str::<EstimateRecord>(line.trim_end()) {
                Ok(record) => parsed.push((record, end)),
                Err(_) => break,
            }
            offset = end;
        }

        let n = config.n_agents as usize;
        let rounds = config.rounds as usize;
        let block_len = n * rounds;
        let mut completed = Vec::new();
        let mut cursor = 0;
        let mut keep_bytes = 0;
        'blocks: for &q in &config.questions {
            if cursor + block_len > parsed.len() {
                break;
            }
            let block = &parsed[cursor..cursor + block_len];
            for round in 0..rounds {
                for agent in 0..n {
                    let rec = &block[round * n + agent].0;
                    let expected_shape = rec.question == q
                        && rec.round == (round + 1) as u32
                        && rec.agent == (agent + 1) as u32
                        && rec.party == party
                        && rec.condition == condition
                        && rec.run == run;
                    if !expected_shape {
                        break 'blocks;
                    }
                }
            }
            keep_bytes = block[block_len - 1].1;
            completed.push((q, block.iter().map(|(r, _)| r.clone()).collect()));
            cursor += block_len;
        }

        if keep_bytes < text.len() {
            if keep_bytes == 0 {
                std::fs::remove_file(&path).map_err(|e| self.io(&path, e))?;
            } else {
                std::fs::write(&path, &text.as_bytes()[..keep_bytes])
                    .map_err(|e| self.io(&path, e))?;
            }
        }
        Ok(completed)
    }

    pub fn mark_aborted(
        &self,
        party: Party,
        condition: Condition,
        run: u32,
        message: &str,
    ) -> Result<(), EngineError> {
        let path = self.abort_path(party, condition, run);
        std::fs::write(&path, message).map_err(|e| self.io(&path, e))
    }

    pub fn clear_aborted(
        &self,
        party: Party,
        condition: Condition,
        run: u32,
    ) -> Result<(), EngineError> {
        let path = self.abort_path(party, condition, run);
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| self.io(&path, e))?;
        }
        Ok(())
    }

    pub fn read_aborted(
        &self,
        party: Party,
        condition: Condition,
        run: u32,
    ) -> Option<String> {
        std::fs::read_to_string(self.abort_path(party, condition, run)).ok()
    }

    /// All records across all run files, file-then-line order. A trailing
    /// partial line (interrupted write) is skipped; anything else malformed
    /// is an error.
    pub fn read_all_records(&self) -> Result<Vec<EstimateRecord>, EngineError> {
        let mut records = Vec::new();
        for path in self.sorted_files(&self.runs_dir(), "jsonl")? {
            let text = std::fs::read_to_string(&path).map_err(|e| self.io(&path, e))?;
            for (idx, line) in text.split_inclusive('\n').enumerate() {
                if !line.ends_with('\n') {
                    break;
                }
                let record =
                    serde_json::from_str(line.trim_end()).map_err(|e| EngineError::Corrupt {
                        path: path.clone(),
                        line: idx + 1,
                        message: e.to_string(),
                    })?;
                records.push(record);
            }
        }
        Ok(records)
    }

    /// Hash of every file in the store (names and bytes), stable across
    /// platforms; equal checksums mean byte-identical stores.
    pub fn checksum(&self) -> Result<String, EngineError> {
        let mut hasher = Sha256::new();
        let mut files = vec![self.manifest_path()];
        files.extend(self.sorted_files(&self.runs_dir(), "")?);
        files.extend(self.sorted_files(&self.networks_dir(), "")?);
        for path in files {
            let name = path
                .strip_prefix(&self.dir)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            let bytes = std::fs::read(&path).map_err(|e| self.io(&path, e))?;
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            hasher.update(&bytes);
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Files directly under `dir` with the given extension ("" = all), sorted
    /// by name.
    fn sorted_files(&self, dir: &Path, extension: &str) -> Result<Vec<PathBuf>, EngineError> {
        let mut files = Vec::new();
        if !dir.exists() {
            return Ok(files);
        }
        let entries = std::fs::read_dir(dir).map_err(|e| self.io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| self.io(dir, e))?;
            let path = entry.path();
            if !path.is_file() {
                continue;
            }
            if !extension.is_empty()
                && path.extension().map(|e| e.to_string_lossy().to_string())
                    != Some(extension.to_string())
            {
                continue;
            }
            files.push(path);
        }
        files.sort();
        Ok(files)
    }

    fn io(&self, path: &Path, source: std::io::Error) -> EngineError {
        EngineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
