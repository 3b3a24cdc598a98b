//! Experiment orchestration: for each party, condition, run, and question,
//! collect round-1 estimates, then show Social agents their peers' previous
//! average and collect revisions, round by round.
//!
//! Execution is sequential and fully derived from the master seed: every
//! (party, condition, run, question) cell draws from its own hash-derived rng
//! stream, and every Social run's network is derived from (seed, party, run).
//! Reruns and resumed runs therefore produce byte-identical stores.

mod store;

pub use store::{StoreManifest, TranscriptStore, MANIFEST_FILE};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    respond, AgentBackend, AgentError, AgentState, LlmBackend, ReplayBackend, RoundInput,
    SyntheticBackend,
};
use crate::model::{
    BackendConfig, Condition, EstimateRecord, ExperimentConfig, InducedBiasBank, ModelError,
    Party, Persona, PersonaBank, PersonaDetail, Question, QuestionBank,
};
use crate::network::{Network, NetworkError};
use crate::Value;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("store {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("store holds a different config (hash {stored}) than requested ({requested})")]
    ConfigMismatch { stored: String, requested: String },
    #[error("store written by a different question bank ({stored}); current bank is {current}")]
    QuestionBankMismatch { stored: String, current: String },
    #[error("no transcript store at {0}")]
    StoreMissing(PathBuf),
    #[error("config names question {0}, which the bank does not hold")]
    UnknownQuestion(u8),
    #[error("persona bank holds {have} detailed {party} personas, config needs {need}")]
    NotEnoughPersonas {
        party: Party,
        need: u32,
        have: usize,
    },
    #[error("network file {path} does not match the wiring derived from the seed")]
    NetworkDrift { path: PathBuf },
}

/// One run of one group: a party, a condition, and `n_agents * rounds`
/// records per question.
#[derive(Debug, Clone)]
pub struct RunTranscript {
    pub party: Party,
    pub condition: Condition,
    /// 1-based run index within (party, condition).
    pub run: u32,
    /// Interaction graph; `None` for Control runs, which never see feedback.
    pub network: Option<Network>,
    pub records: Vec<EstimateRecord>,
    /// Backend failure that stopped this run early; complete question blocks
    /// collected before the failure are kept.
    pub aborted: Option<String>,
}

/// Where a transcript set came from. Timestamps live here and never in the
/// store, which must stay byte-deterministic.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub backend: String,
    pub seed: u64,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

/// Every run of one experiment, in execution order.
#[derive(Debug, Clone)]
pub struct TranscriptSet {
    pub config: ExperimentConfig,
    pub question_checksum: String,
    pub runs: Vec<RunTranscript>,
    pub provenance: Provenance,
}

impl TranscriptSet {
    pub fn records(&self) -> impl Iterator<Item = &EstimateRecord> {
        self.runs.iter().flat_map(|r| r.records.iter())
    }

    pub fn total_records(&self) -> usize {
        self.runs.iter().map(|r| r.records.len()).sum()
    }

    /// Load a finished (or partial) store back into memory. Social networks
    /// are rebuilt from their edge dumps.
    pub fn from_store(dir: &Path) -> Result<TranscriptSet, EngineError> {
        let (store, manifest) = TranscriptStore::open(dir)?;
        let config = manifest.config;
        let mut runs = Vec::new();
        for party in Party::ALL {
            for condition in Condition::ALL {
                let count = match condition {
                    Condition::Social => config.runs_social,
                    Condition::Control => config.runs_control,
                };
                for run in 1..=count {
                    let completed = store.prepare_run(party, condition, run, &config)?;
                    let records: Vec<EstimateRecord> =
                        completed.into_iter().flat_map(|(_, r)| r).collect();
                    let network = match condition {
                        Condition::Social if store.network_path(party, run).exists() => {
                            Some(store.read_network(party, run, config.n_agents)?)
                        }
                        _ => None,
                    };
                    runs.push(RunTranscript {
                        party,
                        condition,
                        run,
                        network,
                        records,
                        aborted: store.read_aborted(party, condition, run),
                    });
                }
            }
        }
        Ok(TranscriptSet {
            question_checksum: manifest.question_checksum,
            runs,
            provenance: Provenance {
                backend: config.backend.kind().to_string(),
                seed: config.seed,
                started_unix_ms: 0,
                finished_unix_ms: 0,
            },
            config,
        })
    }
}

/// Orchestrator bound to a config and its banks.
pub struct Engine {
    config: ExperimentConfig,
    questions: QuestionBank,
    personas: PersonaBank,
    biases: InducedBiasBank,
}

impl Engine {
    /// Engine over the bundled banks.
    pub fn new(config: ExperimentConfig) -> Engine {
        Engine {
            config,
            questions: QuestionBank::bundled(),
            personas: PersonaBank::bundled(),
            biases: InducedBiasBank::bundled(),
        }
    }

    pub fn with_banks(
        config: ExperimentConfig,
        questions: QuestionBank,
        personas: PersonaBank,
        biases: InducedBiasBank,
    ) -> Engine {
        Engine {
            config,
            questions,
            personas,
            biases,
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    /// Execute the experiment. With a store directory, records are appended
    /// round by round and existing complete work is never recomputed; without
    /// one, everything stays in memory.
    pub fn run(&self, dir: Option<&Path>) -> Result<TranscriptSet, EngineError> {
        let started_unix_ms = now_ms();
        let store = match dir {
            Some(d) => Some(TranscriptStore::create_or_open(
                d,
                &self.config,
                &self.questions.checksum(),
            )?),
            None => None,
        };
        let question_list: Vec<&Question> = self
            .config
            .questions
            .iter()
            .map(|&id| self.questions.get(id).ok_or(EngineError::UnknownQuestion(id)))
            .collect::<Result<_, _>>()?;
        let mut backend = self.build_backend()?;

        let mut runs = Vec::new();
        for party in Party::ALL {
            let personas = self.personas_for(party)?;
            for condition in Condition::ALL {
                let count = match condition {
                    Condition::Social => self.config.runs_social,
                    Condition::Control => self.config.runs_control,
                };
                for run in 1..=count {
                    let network = match condition {
                        Condition::Social => {
                            let net = self.network_for(party, run)?;
                            if let Some(store) = &store {
                                store.write_or_verify_network(party, run, &net.edge_list())?;
                            }
                            Some(net)
                        }
                        Condition::Control => None,
                    };

                    let completed = match &store {
                        Some(s) => s.prepare_run(party, condition, run, &self.config)?,
                        None => Vec::new(),
                    };
                    let done: BTreeSet<u8> = completed.iter().map(|(q, _)| *q).collect();
                    let mut records: Vec<EstimateRecord> =
                        completed.into_iter().flat_map(|(_, r)| r).collect();

                    let mut aborted = None;
                    for question in &question_list {
                        if done.contains(&question.id) {
                            continue;
                        }
                        match self.run_cell(
                            backend.as_mut(),
                            question,
                            party,
                            condition,
                            run,
                            network.as_ref(),
                            &personas,
                            store.as_ref(),
                        ) {
                            Ok(mut cell) => records.append(&mut cell),
                            Err(e) => {
                                let message = e.to_string();
                                log::warn!(
                                    "{party} {condition} run {run} aborted at q{}: {message}",
                                    question.id
                                );
                                if let Some(s) = &store {
                                    s.mark_aborted(party, condition, run, &message)?;
                                }
                                aborted = Some(message);
                                break;
                            }
                        }
                    }
                    if aborted.is_none() {
                        if let Some(s) = &store {
                            s.clear_aborted(party, condition, run)?;
                        }
                    }
                    log::debug!(
                        "{party} {condition} run {run}: {} records{}",
                        records.len(),
                        if aborted.is_some() { " (aborted)" } else { "" }
                    );
                    runs.push(RunTranscript {
                        party,
                        condition,
                        run,
                        network,
                        records,
                        aborted,
                    });
                }
            }
        }

        Ok(TranscriptSet {
            config: self.config.clone(),
            question_checksum: self.questions.checksum(),
            runs,
            provenance: Provenance {
                backend: self.config.backend.kind().to_string(),
                seed: self.config.seed,
                started_unix_ms,
                finished_unix_ms: now_ms(),
            },
        })
    }

    /// One (party, condition, run, question) cell: fresh agent states, fresh
    /// rng stream, rounds as strict barriers, flushed per round.
    #[allow(clippy::too_many_arguments)]
    fn run_cell(
        &self,
        backend: &mut dyn AgentBackend,
        question: &Question,
        party: Party,
        condition: Condition,
        run: u32,
        network: Option<&Network>,
        personas: &[Persona],
        store: Option<&TranscriptStore>,
    ) -> Result<Vec<EstimateRecord>, EngineError> {
        let n = self.config.n_agents as usize;
        let rounds = self.config.rounds;
        let mut rng = ChaCha8Rng::from_seed(cell_seed(
            self.config.seed,
            party,
            condition,
            run,
            question.id,
        ));
        let mut states: Vec<AgentState> = personas
            .iter()
            .enumerate()
            .map(|(i, p)| AgentState::new(i as u32 + 1, p.clone(), condition))
            .collect();

        let mut all = Vec::with_capacity(n * rounds as usize);
        // Exactly the previous round's values; a missing estimate stays
        // missing here even if the agent answered earlier rounds.
        let mut prev_values: Vec<Option<Value>> = vec![None; n];
        for round in 1..=rounds {
            let mut round_records = Vec::with_capacity(n);
            for (idx, state) in states.iter_mut().enumerate() {
                let (feedback, imputed) = if condition == Condition::Social && round >= 2 {
                    let net = network.expect("social runs carry a network");
                    match net.peer_average_present(&|j| prev_values[j as usize], idx as u32) {
                        Some((avg, _skipped)) => (Some(avg), false),
                        // every neighbor missing: fall back to the agent's own
                        // previous estimate
                        None => (state.last_value, true),
                    }
                } else {
                    (None, false)
                };

                let record = if condition == Condition::Social && round >= 2 && feedback.is_none()
                {
                    // Neither neighbors nor the agent itself have any prior
                    // value; no feedback sentence can be formed, so the round
                    // is recorded as missing without a backend call.
                    state.memory.push((String::new(), String::new()));
                    EstimateRecord {
                        agent: state.agent,
                        party,
                        condition,
                        run,
                        round,
                        question: question.id,
                        value: None,
                        raw_text: String::new(),
                        feedback_shown: None,
                        feedback_imputed: true,
                        extreme: false,
                        source_id: None,
                    }
                } else {
                    let input = RoundInput {
                        question,
                        run,
                        round,
                        total_rounds: rounds,
                        cot: self.config.cot,
                        induced_bias: self.config.induced_bias,
                        temperature: self.config.temperature,
                        feedback,
                        feedback_imputed: imputed,
                    };
                    respond(backend, state, &input, &mut rng)?
                };
                round_records.push(record);
            }

            // Barrier: this round's values become visible only now.
            for (idx, record) in round_records.iter().enumerate() {
                prev_values[idx] = record.value;
            }
            if let Some(store) = store {
                store.append_records(party, condition, run, &round_records)?;
            }
            all.extend(round_records);
        }
        Ok(all)
    }

    fn build_backend(&self) -> Result<Box<dyn AgentBackend>, EngineError> {
        Ok(match &self.config.backend {
            BackendConfig::Synthetic(params) => Box::new(SyntheticBackend::new(params.clone())),
            BackendConfig::Replay(params) => {
                let (store, _) = TranscriptStore::open(&params.source)?;
                Box::new(ReplayBackend::new(store.read_all_records()?))
            }
            BackendConfig::Llm(params) => Box::new(LlmBackend::new(params.clone())?),
        })
    }

    /// The run's roster: first `n_agents` detailed personas in bank order, or
    /// generated simple identities.
    fn personas_for(&self, party: Party) -> Result<Vec<Persona>, EngineError> {
        let n = self.config.n_agents;
        let mut roster: Vec<Persona> = match self.config.persona_detail {
            PersonaDetail::Detailed => {
                let available = self.personas.detailed(party);
                if (n as usize) > available.len() {
                    return Err(EngineError::NotEnoughPersonas {
                        party,
                        need: n,
                        have: available.len(),
                    });
                }
                available.into_iter().take(n as usize).cloned().collect()
            }
            PersonaDetail::Simple => (1..=n).map(|i| Persona::simple(party, i)).collect(),
        };
        if self.config.induced_bias {
            roster = roster
                .into_iter()
                .map(|p| p.with_induced_bias(&self.biases, &self.config.questions))
                .collect();
        }
        Ok(roster)
    }

    fn network_for(&self, party: Party, run: u32) -> Result<Network, NetworkError> {
        Network::build(
            self.config.n_agents,
            self.config.degree,
            self.config.topology,
            network_seed(self.config.seed, party, run),
        )
    }
}

/// Run the experiment with persistence; reruns against the same directory
/// resume instead of recomputing.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> Result<TranscriptSet, EngineError> {
    Engine::new(config.clone()).run(Some(dir))
}

/// Run without persistence; for tests and small parameter sweeps.
pub fn run_in_memory(config: &ExperimentConfig) -> Result<TranscriptSet, EngineError> {
    Engine::new(config.clone()).run(None)
}

/// Complete whatever is missing in an existing store, using its own config
/// snapshot.
pub fn resume(dir: &Path) -> Result<TranscriptSet, EngineError> {
    let (_, manifest) = TranscriptStore::open(dir)?;
    Engine::new(manifest.config).run(Some(dir))
}

/// Rng seed for one cell: hash of the master seed and the cell coordinates.
/// Cells are therefore independent of execution order and of each other.
fn cell_seed(master: u64, party: Party, condition: Condition, run: u32, question: u8) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(b"cell");
    hasher.update(party.to_string().as_bytes());
    hasher.update(condition.to_string().as_bytes());
    hasher.update(run.to_le_bytes());
    hasher.update([question]);
    hasher.finalize().into()
}

/// Seed for one Social run's network wiring.
fn network_seed(master: u64, party: Party, run: u32) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(b"net");
    hasher.update(party.to_string().as_bytes());
    hasher.update(run.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
