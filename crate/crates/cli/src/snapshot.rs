//! Single-file transcript snapshots. The engine's run-store assumes every
//! group has the full agent lattice; ingested human data can be ragged, so
//! snapshots serialize runs verbatim, networks as adjacency lists.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crowds_core::engine::{Provenance, RunTranscript, TranscriptSet};
use crowds_core::model::{Condition, EstimateRecord, ExperimentConfig, Party};
use crowds_core::network::Network;

#[derive(Serialize, Deserialize)]
struct Snapshot {
    config: ExperimentConfig,
    question_checksum: String,
    backend: String,
    seed: u64,
    runs: Vec<SnapshotRun>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotRun {
    party: Party,
    condition: Condition,
    run: u32,
    /// Neighbor lists indexed by 0-based agent; absent for control runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    network: Option<Vec<Vec<u32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aborted: Option<String>,
    records: Vec<EstimateRecord>,
}

pub fn save(set: &TranscriptSet, path: &Path) -> anyhow::Result<()> {
    let snapshot = Snapshot {
        config: set.config.clone(),
        question_checksum: set.question_checksum.clone(),
        backend: set.provenance.backend.clone(),
        seed: set.provenance.seed,
        runs: set
            .runs
            .iter()
            .map(|run| SnapshotRun {
                party: run.party,
                condition: run.condition,
                run: run.run,
                network: run.network.as_ref().map(|net| {
                    (0..net.n())
                        .map(|i| net.neighbors(i).iter().copied().collect())
                        .collect()
                }),
                aborted: run.aborted.clone(),
                records: run.records.clone(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&snapshot).expect("snapshot serializes");
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> anyhow::Result<TranscriptSet> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading snapshot {}", path.display()))?;
    let snapshot: Snapshot = serde_json::from_str(&text)
        .with_context(|| format!("parsing snapshot {}", path.display()))?;
    let mut runs = Vec::new();
    for run in snapshot.runs {
        let network = run
            .network
            .map(|lists| {
                let adjacency: Vec<BTreeSet<u32>> =
                    lists.into_iter().map(|l| l.into_iter().collect()).collect();
                Network::from_imported(adjacency)
            })
            .transpose()
            .with_context(|| {
                format!(
                    "snapshot {}: bad network for {} {} run {}",
                    path.display(),
                    run.party,
                    run.condition,
                    run.run
                )
            })?;
        runs.push(RunTranscript {
            party: run.party,
            condition: run.condition,
            run: run.run,
            network,
            records: run.records,
            aborted: run.aborted,
        });
    }
    Ok(TranscriptSet {
        config: snapshot.config,
        question_checksum: snapshot.question_checksum,
        runs,
        provenance: Provenance {
            backend: snapshot.backend,
            seed: snapshot.seed,
            started_unix_ms: 0,
            finished_unix_ms: 0,
        },
    })
}
