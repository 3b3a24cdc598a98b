//! External human-study transcripts: CSV ingestion into the engine schema,
//! neighbor-feedback reconstruction, and fine-tuning chat-pair export.
//!
//! Input is long-format CSV, one row per (subject, question, round), with a
//! header. Column names are remappable; the defaults match the published
//! partisan-crowds study layout described in the README. Group and subject
//! ids may be arbitrary strings; runs and agent indices are assigned by
//! numeric-aware ordering so re-ingesting the same file is deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::ChatMessage;
use crate::engine::{Provenance, RunTranscript, TranscriptSet};
use crate::model::{
    BackendConfig, Condition, EstimateRecord, ExperimentConfig, Party, Persona, PersonaDetail,
    QuestionBank, Topology,
};
use crate::network::Network;
use crate::prompting::{format_feedback, render_prompt_with_rounds};
use crate::Value;

#[derive(Debug, Error)]
pub enum HumanDataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{path}: required column {column:?} not in header")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: no usable rows")]
    Empty { path: PathBuf },
    #[error("social run {run} ({party}) carries no network")]
    MissingNetwork { party: Party, run: u32 },
    #[error("social feedback absent everywhere; reconstruct feedback before exporting")]
    FeedbackNotReconstructed,
    #[error("export names question {0}, which the bank does not hold")]
    UnknownQuestion(u8),
    #[error(transparent)]
    Prompt(#[from] crate::prompting::PromptError),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
}

/// Header names for the required fields. `neighbors` is only consulted for
/// Social rows; peer ids there may be separated by space, comma, semicolon,
/// or pipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub subject: String,
    pub party: String,
    pub condition: String,
    pub group: String,
    pub question: String,
    pub round: String,
    pub estimate: String,
    pub neighbors: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            subject: "subject".into(),
            party: "party".into(),
            condition: "condition".into(),
            group: "group".into(),
            question: "question".into(),
            round: "round".into(),
            estimate: "estimate".into(),
            neighbors: "neighbors".into(),
        }
    }
}

/// A row the ingester could not or would not use verbatim.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowIssue {
    pub line: u64,
    pub message: String,
}

/// A (subject, question) trajectory needing attention downstream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectFlag {
    pub party: Party,
    pub condition: Condition,
    pub run: u32,
    pub subject: String,
    pub question: u8,
    pub message: String,
}

/// Group tally per experimental arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCount {
    pub party: Party,
    pub condition: Condition,
    pub groups: u32,
    /// Largest subject count over this arm's groups.
    pub subjects: u32,
}

/// What ingestion kept, dropped, and found suspicious.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct IngestReport {
    pub rows_read: usize,
    pub records: usize,
    pub group_counts: Vec<GroupCount>,
    /// Rows excluded entirely, with reasons.
    pub dropped: Vec<RowIssue>,
    /// Rows kept but defective (bad neighbor lists, duplicates).
    pub flagged: Vec<RowIssue>,
    /// Trajectories missing rounds or estimates.
    pub incomplete: Vec<SubjectFlag>,
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub set: TranscriptSet,
    pub report: IngestReport,
}

/// Counts from one feedback-reconstruction pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub struct FeedbackFill {
    /// Records that received a peer average.
    pub filled: usize,
    /// Subset of `filled` averaged over fewer neighbors than the node has.
    pub partial: usize,
    /// Records left without feedback: no neighbor had a previous value.
    pub empty: usize,
}

struct RawRow {
    line: u64,
    subject: String,
    party: Party,
    condition: Condition,
    group: String,
    question: u8,
    round: u32,
    value: Option<Value>,
    neighbors: Option<Vec<String>>,
}

/// Ids sort numerically when they parse as integers, then lexically.
fn id_sort_key(id: &str) -> (u8, u64, String) {
    match id.parse::<u64>() {
        Ok(n) => (0, n, String::new()),
        Err(_) => (1, 0, id.to_string()),
    }
}

fn parse_party(text: &str) -> Option<Party> {
    match text.to_ascii_lowercase().as_str() {
        "dem" | "democrat" | "democratic" | "d" => Some(Party::Dem),
        "rep" | "republican" | "r" => Some(Party::Rep),
        _ => None,
    }
}

fn parse_condition(text: &str) -> Option<Condition> {
    match text.to_ascii_lowercase().as_str() {
        "social" | "s" => Some(Condition::Social),
        "control" | "c" => Some(Condition::Control),
        _ => None,
    }
}

fn split_neighbors(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c == ',' || c == ';' || c == '|')
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Read a long-format human transcript CSV into the engine schema. Question
/// ids must exist in `bank`; groups become runs, subjects become agents, and
/// Social neighbor lists become per-run networks.
pub fn ingest_human_csv(
    path: &Path,
    map: &ColumnMap,
    bank: &QuestionBank,
) -> Result<IngestOutcome, HumanDataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| {
        column(name).ok_or_else(|| HumanDataError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
    };
    let subject_idx = required(&map.subject)?;
    let party_idx = required(&map.party)?;
    let condition_idx = required(&map.condition)?;
    let group_idx = required(&map.group)?;
    let question_idx = required(&map.question)?;
    let round_idx = required(&map.round)?;
    let estimate_idx = required(&map.estimate)?;
    let neighbors_idx = column(&map.neighbors);

    let mut report = IngestReport::default();
    let mut rows: Vec<RawRow> = Vec::new();
    let mut seen: BTreeSet<(Party, Condition, String, String, u8, u32)> = BTreeSet::new();

    for result in reader.records() {
        let record = match result {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                report.dropped.push(RowIssue {
                    line,
                    message: format!("unreadable row: {e}"),
                });
                continue;
            }
        };
        report.rows_read += 1;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let mut drop_row = |message: String| {
            report.dropped.push(RowIssue { line, message });
        };

        let field = |idx: usize| record.get(idx).unwrap_or("");
        let subject = field(subject_idx).to_string();
        if subject.is_empty() {
            drop_row("empty subject id".into());
            continue;
        }
        let Some(party) = parse_party(field(party_idx)) else {
            drop_row(format!("unrecognized party {:?}", field(party_idx)));
            continue;
        };
        let Some(condition) = parse_condition(field(condition_idx)) else {
            drop_row(format!("unrecognized condition {:?}", field(condition_idx)));
            continue;
        };
        let group = field(group_idx).to_string();
        if group.is_empty() {
            drop_row("empty group id".into());
            continue;
        }
        let question: u8 = match field(question_idx).parse() {
            Ok(q) => q,
            Err(_) => {
                drop_row(format!("bad question id {:?}", field(question_idx)));
                continue;
            }
        };
        if bank.get(question).is_none() {
            drop_row(format!("question {question} not in bank"));
            continue;
        }
        let round: u32 = match field(round_idx).parse() {
            Ok(r) if r >= 1 => r,
            _ => {
                drop_row(format!("bad round {:?}", field(round_idx)));
                continue;
            }
        };
        let estimate_text = field(estimate_idx);
        let value = if estimate_text.is_empty() {
            None
        } else {
            match estimate_text.parse::<Value>() {
                Ok(v) if v.is_finite() => Some(v),
                _ => {
                    drop_row(format!("bad estimate {estimate_text:?}"));
                    continue;
                }
            }
        };
        let neighbors = if condition == Condition::Social {
            match neighbors_idx {
                Some(idx) => Some(split_neighbors(field(idx))),
                None => {
                    return Err(HumanDataError::MissingColumn {
                        path: path.to_path_buf(),
                        column: map.neighbors.clone(),
                    })
                }
            }
        } else {
            None
        };

        let key = (
            party,
            condition,
            group.clone(),
            subject.clone(),
            question,
            round,
        );
        if !seen.insert(key) {
            report.flagged.push(RowIssue {
                line,
                message: format!("duplicate row for subject {subject} q{question} t{round}"),
            });
            continue;
        }
        rows.push(RawRow {
            line,
            subject,
            party,
            condition,
            group,
            question,
            round,
            value,
            neighbors,
        });
    }

    if rows.is_empty() {
        return Err(HumanDataError::Empty {
            path: path.to_path_buf(),
        });
    }

    assemble(rows, bank, report)
}

fn csv_error(path: &Path, e: csv::Error) -> HumanDataError {
    if let csv::ErrorKind::Io(io) = e.into_kind() {
        return HumanDataError::Io {
            path: path.to_path_buf(),
            source: io,
        };
    }
    HumanDataError::Csv {
        path: path.to_path_buf(),
        message: "malformed csv".into(),
    }
}

fn assemble(
    rows: Vec<RawRow>,
    bank: &QuestionBank,
    mut report: IngestReport,
) -> Result<IngestOutcome, HumanDataError> {
    // group ids -> run indices, per (party, condition), numeric-aware order
    let mut group_ids: BTreeMap<(Party, Condition), BTreeSet<String>> = BTreeMap::new();
    for row in &rows {
        group_ids
            .entry((row.party, row.condition))
            .or_default()
            .insert(row.group.clone());
    }
    let mut run_of: BTreeMap<(Party, Condition, String), u32> = BTreeMap::new();
    for ((party, condition), ids) in &group_ids {
        let mut ordered: Vec<&String> = ids.iter().collect();
        ordered.sort_by_key(|id| id_sort_key(id));
        for (i, id) in ordered.iter().enumerate() {
            run_of.insert((*party, *condition, (*id).clone()), i as u32 + 1);
        }
    }

    // subject ids -> agent indices, per group
    let mut subject_ids: BTreeMap<(Party, Condition, u32), BTreeSet<String>> = BTreeMap::new();
    for row in &rows {
        let run = run_of[&(row.party, row.condition, row.group.clone())];
        subject_ids
            .entry((row.party, row.condition, run))
            .or_default()
            .insert(row.subject.clone());
    }
    let mut agent_of: BTreeMap<(Party, Condition, u32, String), u32> = BTreeMap::new();
    for ((party, condition, run), ids) in &subject_ids {
        let mut ordered: Vec<&String> = ids.iter().collect();
        ordered.sort_by_key(|id| id_sort_key(id));
        for (i, id) in ordered.iter().enumerate() {
            agent_of.insert((*party, *condition, *run, (*id).clone()), i as u32 + 1);
        }
    }

    let questions: BTreeSet<u8> = rows.iter().map(|r| r.question).collect();
    let rounds = rows.iter().map(|r| r.round).max().unwrap_or(1);
    let n_agents = subject_ids.values().map(|s| s.len()).max().unwrap_or(0) as u32;

    // (party, condition, run, question, round, agent) -> (value, subject)
    let mut values: BTreeMap<(Party, Condition, u32, u8, u32, u32), (Option<Value>, String)> =
        BTreeMap::new();
    // network declarations per social run
    let mut declared: BTreeMap<(Party, u32), BTreeSet<(u32, u32)>> = BTreeMap::new();
    let mut first_list: BTreeMap<(Party, u32, u32), BTreeSet<u32>> = BTreeMap::new();

    for row in &rows {
        let run = run_of[&(row.party, row.condition, row.group.clone())];
        let agent = agent_of[&(row.party, row.condition, run, row.subject.clone())];
        values.insert(
            (row.party, row.condition, run, row.question, row.round, agent),
            (row.value, row.subject.clone()),
        );

        let Some(neighbors) = &row.neighbors else {
            continue;
        };
        if neighbors.len() != 4 {
            report.flagged.push(RowIssue {
                line: row.line,
                message: format!(
                    "subject {} lists {} neighbors, expected 4",
                    row.subject,
                    neighbors.len()
                ),
            });
        }
        let mut listed = BTreeSet::new();
        for token in neighbors {
            match agent_of.get(&(row.party, row.condition, run, token.clone())) {
                Some(&b) if b != agent => {
                    listed.insert(b - 1);
                    declared
                        .entry((row.party, run))
                        .or_default()
                        .insert((agent - 1, b - 1));
                }
                Some(_) => report.flagged.push(RowIssue {
                    line: row.line,
                    message: format!("subject {} lists itself as neighbor", row.subject),
                }),
                None => report.flagged.push(RowIssue {
                    line: row.line,
                    message: format!("unknown neighbor id {token:?}"),
                }),
            }
        }
        match first_list.get(&(row.party, run, agent)) {
            None => {
                first_list.insert((row.party, run, agent), listed);
            }
            Some(first) if *first != listed => report.flagged.push(RowIssue {
                line: row.line,
                message: format!(
                    "subject {} neighbor list differs from its earlier rows",
                    row.subject
                ),
            }),
            Some(_) => {}
        }
    }

    // completeness: every round of a started trajectory needs an estimate
    for ((party, condition, run), subjects) in &subject_ids {
        for subject in subjects {
            let agent = agent_of[&(*party, *condition, *run, subject.clone())];
            for &q in &questions {
                let present: Vec<bool> = (1..=rounds)
                    .map(|t| {
                        values
                            .get(&(*party, *condition, *run, q, t, agent))
                            .is_some_and(|(v, _)| v.is_some())
                    })
                    .collect();
                let started = (1..=rounds)
                    .any(|t| values.contains_key(&(*party, *condition, *run, q, t, agent)));
                if started && !present.iter().all(|&p| p) {
                    report.incomplete.push(SubjectFlag {
                        party: *party,
                        condition: *condition,
                        run: *run,
                        subject: subject.clone(),
                        question: q,
                        message: format!(
                            "{} of {rounds} rounds have estimates",
                            present.iter().filter(|&&p| p).count()
                        ),
                    });
                }
            }
        }
    }

    // symmetrized networks; one-way declarations are kept but flagged
    let mut networks: BTreeMap<(Party, u32), Network> = BTreeMap::new();
    for ((party, run), edges) in &declared {
        for &(a, b) in edges {
            if !edges.contains(&(b, a)) {
                report.flagged.push(RowIssue {
                    line: 0,
                    message: format!(
                        "{party} social run {run}: edge {a}-{b} declared one-way; symmetrized"
                    ),
                });
            }
        }
        let n = subject_ids[&(*party, Condition::Social, *run)].len();
        let mut adjacency = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            adjacency[a as usize].insert(b);
            adjacency[b as usize].insert(a);
        }
        networks.insert((*party, *run), Network::from_imported(adjacency)?);
    }

    let question_list: Vec<u8> = questions.iter().copied().collect();
    let config = ExperimentConfig {
        questions: question_list.clone(),
        persona_detail: PersonaDetail::Simple,
        cot: false,
        induced_bias: false,
        backend: BackendConfig::default(),
        n_agents,
        degree: 4,
        rounds,
        runs_social: group_ids
            .iter()
            .filter(|((_, c), _)| *c == Condition::Social)
            .map(|(_, ids)| ids.len() as u32)
            .max()
            .unwrap_or(0),
        runs_control: group_ids
            .iter()
            .filter(|((_, c), _)| *c == Condition::Control)
            .map(|(_, ids)| ids.len() as u32)
            .max()
            .unwrap_or(0),
        temperature: 0.0,
        seed: 0,
        topology: Topology::Imported,
    };

    let mut runs = Vec::new();
    for party in Party::ALL {
        for condition in Condition::ALL {
            let count = group_ids
                .get(&(party, condition))
                .map(|ids| ids.len() as u32)
                .unwrap_or(0);
            for run in 1..=count {
                let mut records = Vec::new();
                for &q in &question_list {
                    for round in 1..=rounds {
                        let subjects = &subject_ids[&(party, condition, run)];
                        for agent in 1..=subjects.len() as u32 {
                            let Some((value, subject)) =
                                values.get(&(party, condition, run, q, round, agent))
                            else {
                                continue;
                            };
                            records.push(EstimateRecord {
                                agent,
                                party,
                                condition,
                                run,
                                round,
                                question: q,
                                value: *value,
                                raw_text: String::new(),
                                feedback_shown: None,
                                feedback_imputed: false,
                                extreme: false,
                                source_id: Some(subject.clone()),
                            });
                        }
                    }
                }
                report.records += records.len();
                runs.push(RunTranscript {
                    party,
                    condition,
                    run,
                    network: match condition {
                        Condition::Social => networks.remove(&(party, run)),
                        Condition::Control => None,
                    },
                    records,
                    aborted: None,
                });
            }
        }
    }

    for ((party, condition), ids) in &group_ids {
        let subjects = ids
            .iter()
            .map(|id| {
                let run = run_of[&(*party, *condition, id.clone())];
                subject_ids[&(*party, *condition, run)].len() as u32
            })
            .max()
            .unwrap_or(0);
        report.group_counts.push(GroupCount {
            party: *party,
            condition: *condition,
            groups: ids.len() as u32,
            subjects,
        });
    }

    Ok(IngestOutcome {
        set: TranscriptSet {
            config,
            question_checksum: bank.checksum(),
            runs,
            provenance: Provenance {
                backend: "human_csv".into(),
                seed: 0,
                started_unix_ms: 0,
                finished_unix_ms: 0,
            },
        },
        report,
    })
}

/// Fill `feedback_shown` for Social rounds >= 2 with the mean of each node's
/// neighbors' previous-round estimates. Averages shrink over absent
/// neighbors; a node whose neighbors all lack values keeps `None`.
pub fn reconstruct_feedback(set: &mut TranscriptSet) -> Result<FeedbackFill, HumanDataError> {
    let mut fill = FeedbackFill::default();
    for run in &mut set.runs {
        if run.condition != Condition::Social {
            continue;
        }
        let network = run.network.as_ref().ok_or(HumanDataError::MissingNetwork {
            party: run.party,
            run: run.run,
        })?;
        let mut by_slot: BTreeMap<(u8, u32, u32), Option<Value>> = BTreeMap::new();
        for rec in &run.records {
            by_slot.insert((rec.question, rec.round, rec.agent), rec.value);
        }
        for rec in &mut run.records {
            if rec.round < 2 {
                continue;
            }
            let (q, prev_round) = (rec.question, rec.round - 1);
            let prev = |j: u32| by_slot.get(&(q, prev_round, j + 1)).copied().flatten();
            match network.peer_average_present(&prev, rec.agent - 1) {
                Some((avg, skipped)) => {
                    rec.feedback_shown = Some(avg);
                    fill.filled += 1;
                    if skipped > 0 {
                        fill.partial += 1;
                    }
                }
                None => fill.empty += 1,
            }
        }
    }
    Ok(fill)
}

/// One fine-tuning example: the round-`round` exchange for one subject and
/// question, with all earlier rounds as context.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatPairRecord {
    pub party: Party,
    pub condition: Condition,
    pub run: u32,
    pub subject: String,
    pub question: u8,
    pub round: u32,
    /// Prompts of rounds 1..=round with responses of rounds 1..round
    /// interleaved; always ends with a user prompt.
    pub context: Vec<ChatMessage>,
    /// The round's response line.
    pub target: String,
}

impl ChatPairRecord {
    /// Context plus the target as a final assistant message; the shape
    /// chat-format fine-tuning endpoints ingest.
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut out = self.context.clone();
        out.push(ChatMessage::assistant(self.target.clone()));
        out
    }
}

/// Export outcome: the pairs plus the trajectories left out and why.
#[derive(Debug)]
pub struct FinetuneExport {
    pub pairs: Vec<ChatPairRecord>,
    pub excluded: Vec<SubjectFlag>,
}

/// Build fine-tuning pairs for one (party, condition) arm. Every complete
/// (subject, question) trajectory yields one pair per round. `questions`
/// defaults to the held-out training split 5..=8. Social sets must have
/// feedback reconstructed first.
pub fn export_finetune_pairs(
    set: &TranscriptSet,
    bank: &QuestionBank,
    party: Party,
    condition: Condition,
    questions: Option<&[u8]>,
) -> Result<FinetuneExport, HumanDataError> {
    let rounds = set.config.rounds;
    let filter: Vec<u8> = match questions {
        Some(qs) => qs.to_vec(),
        None => vec![5, 6, 7, 8],
    };
    for &q in &filter {
        if bank.get(q).is_none() {
            return Err(HumanDataError::UnknownQuestion(q));
        }
    }

    if condition == Condition::Social {
        let mut candidates = 0usize;
        let mut with_feedback = 0usize;
        for run in set.runs.iter().filter(|r| r.party == party && r.condition == condition) {
            for rec in run.records.iter().filter(|r| {
                r.round >= 2 && filter.contains(&r.question)
            }) {
                candidates += 1;
                if rec.feedback_shown.is_some() {
                    with_feedback += 1;
                }
            }
        }
        if candidates > 0 && with_feedback == 0 {
            return Err(HumanDataError::FeedbackNotReconstructed);
        }
    }

    let mut pairs = Vec::new();
    let mut excluded = Vec::new();
    for run in set.runs.iter().filter(|r| r.party == party && r.condition == condition) {
        // (question, agent) -> round-indexed records
        let mut slots: BTreeMap<(u8, u32), Vec<Option<&EstimateRecord>>> = BTreeMap::new();
        for rec in &run.records {
            if !filter.contains(&rec.question) || rec.round > rounds {
                continue;
            }
            slots
                .entry((rec.question, rec.agent))
                .or_insert_with(|| vec![None; rounds as usize])[(rec.round - 1) as usize] =
                Some(rec);
        }

        for &q in &filter {
            let question = bank.get(q).expect("validated above");
            let agents: Vec<u32> = slots
                .keys()
                .filter(|(sq, _)| *sq == q)
                .map(|&(_, a)| a)
                .collect();
            for agent in agents {
                let per_round = &slots[&(q, agent)];
                let subject = per_round
                    .iter()
                    .flatten()
                    .find_map(|r| r.source_id.clone())
                    .unwrap_or_else(|| agent.to_string());
                let exclude = |message: String| SubjectFlag {
                    party,
                    condition,
                    run: run.run,
                    subject: subject.clone(),
                    question: q,
                    message,
                };

                let complete = per_round.iter().enumerate().all(|(i, slot)| {
                    slot.is_some_and(|r| {
                        r.value.is_some()
                            && (condition == Condition::Control
                                || i == 0
                                || r.feedback_shown.is_some())
                    })
                });
                if !complete {
                    excluded.push(exclude("incomplete trajectory or missing feedback".into()));
                    continue;
                }

                let persona = Persona::simple(party, agent);
                let mut context: Vec<ChatMessage> = Vec::new();
                let mut failed = None;
                for k in 1..=rounds {
                    let rec = per_round[(k - 1) as usize].expect("checked complete");
                    let feedback = if condition == Condition::Social && k >= 2 {
                        rec.feedback_shown
                    } else {
                        None
                    };
                    let prompt = match render_prompt_with_rounds(
                        k,
                        rounds,
                        &persona,
                        question,
                        condition,
                        false,
                        false,
                        feedback,
                    ) {
                        Ok(p) => p,
                        Err(e) => {
                            failed = Some(e);
                            break;
                        }
                    };
                    let target = format!(
                        "My Final Answer: {}",
                        format_feedback(rec.value.expect("checked complete"))
                    );
                    context.push(ChatMessage::user(prompt.text));
                    pairs.push(ChatPairRecord {
                        party,
                        condition,
                        run: run.run,
                        subject: subject.clone(),
                        question: q,
                        round: k,
                        context: context.clone(),
                        target: target.clone(),
                    });
                    context.push(ChatMessage::assistant(target));
                }
                if let Some(e) = failed {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(FinetuneExport { pairs, excluded })
}

/// Line-delimited export: one JSON object per pair, with the target appended
/// to `messages` as the final assistant turn.
pub fn finetune_jsonl(pairs: &[ChatPairRecord]) -> String {
    #[derive(Serialize)]
    struct WirePair<'a> {
        party: Party,
        condition: Condition,
        run: u32,
        subject: &'a str,
        question: u8,
        round: u32,
        messages: Vec<ChatMessage>,
    }
    let mut out = String::new();
    for pair in pairs {
        let wire = WirePair {
            party: pair.party,
            condition: pair.condition,
            run: pair.run,
            subject: &pair.subject,
            question: pair.question,
            round: pair.round,
            messages: pair.messages(),
        };
        out.push_str(&serde_json::to_string(&wire).expect("pair serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(content.as_bytes()).unwrap();
        file.flush().unwrap();
        file
    }

    /// 5-subject Social group (complete 4-regular graph) plus a 2-subject
    /// Control group, one question, three rounds.
    fn toy_csv() -> String {
        let mut text = String::from("subject,party,condition,group,question,round,estimate,neighbors\n");
        let social_r1 = [(1, 100.0), (2, 3.0), (3, 5.0), (4, 7.0), (5, 9.0)];
        let social_r2 = [(1, 50.0), (2, 20.0), (3, 6.0), (4, 7.0), (5, 8.0)];
        let social_r3 = [(1, 30.0), (2, 10.0), (3, 6.0), (4, 7.0), (5, 7.0)];
        for (round, values) in [(1, social_r1), (2, social_r2), (3, social_r3)] {
            for (s, v) in values {
                let neighbors: Vec<String> = (1..=5u32)
                    .filter(|&n| n != s)
                    .map(|n| n.to_string())
                    .collect();
                text.push_str(&format!(
                    "{s},dem,social,g1,5,{round},{v},{}\n",
                    neighbors.join(" ")
                ));
            }
        }
        for round in 1..=3 {
            for (s, v) in [(21, 12.0), (22, 14.0)] {
                text.push_str(&format!("{s},dem,control,g2,5,{round},{v},\n"));
            }
        }
        text
    }

    #[test]
    fn ingest_maps_fields_into_records() {
        let file = write_csv(
            "subject,party,condition,group,question,round,estimate,neighbors\n\
             7,Rep,Social,3,5,2,20,\n",
        );
        let outcome =
            ingest_human_csv(file.path(), &ColumnMap::default(), &QuestionBank::bundled()).unwrap();
        assert_eq!(outcome.report.records, 1);
        let rec = outcome.set.records().next().unwrap();
        assert_eq!(rec.party, Party::Rep);
        assert_eq!(rec.condition, Condition::Social);
        assert_eq!(rec.question, 5);
        assert_eq!(rec.round, 2);
        assert_eq!(rec.value, Some(20.0));
        assert_eq!(rec.run, 1);
        assert_eq!(rec.agent, 1);
        assert_eq!(rec.source_id.as_deref(), Some("7"));
        // empty neighbor list on a social row is flagged, not dropped
        assert!(outcome.report.flagged.iter().any(|f| f.message.contains("0 neighbors")));
        // lone round 2 of 2 declared rounds: round 1 absent entirely
        assert_eq!(outcome.set.config.rounds, 2);
    }

    #[test]
    fn ingest_builds_runs_networks_and_counts() {
        let file = write_csv(&toy_csv());
        let outcome =
            ingest_human_csv(file.path(), &ColumnMap::default(), &QuestionBank::bundled()).unwrap();
        let set = &outcome.set;
        assert_eq!(set.config.rounds, 3);
        assert_eq!(set.config.n_agents, 5);
        assert_eq!(outcome.report.records, 5 * 3 + 2 * 3);
        assert!(outcome.report.dropped.is_empty());
        assert!(outcome.report.incomplete.is_empty());

        let social = set
            .runs
            .iter()
            .find(|r| r.condition == Condition::Social)
            .unwrap();
        let network = social.network.as_ref().unwrap();
        assert_eq!(network.n(), 5);
        assert_eq!(network.degree(), 4);

        let counts = &outcome.report.group_counts;
        assert!(counts
            .iter()
            .any(|c| c.condition == Condition::Social && c.groups == 1 && c.subjects == 5));
    }

    #[test]
    fn reconstruct_feedback_averages_previous_round_neighbors() {
        let file = write_csv(&toy_csv());
        let mut outcome =
            ingest_human_csv(file.path(), &ColumnMap::default(), &QuestionBank::bundled()).unwrap();
        let fill = reconstruct_feedback(&mut outcome.set).unwrap();
        assert_eq!(fill.filled, 10); // 5 subjects x rounds 2 and 3
        assert_eq!(fill.partial, 0);
        assert_eq!(fill.empty, 0);

        let social = outcome
            .set
            .runs
            .iter()
            .find(|r| r.condition == Condition::Social)
            .unwrap();
        let feedback = |agent: u32, round: u32| {
            social
                .records
                .iter()
                .find(|r| r.agent == agent && r.round == round)
                .unwrap()
                .feedback_shown
                .unwrap()
        };
        // subject 1 round 2: mean of 3, 5, 7, 9
        assert_eq!(feedback(1, 2), 6.0);
        // subject 2 round 2: mean of 100, 5, 7, 9
        assert_eq!(feedback(2, 2), 30.25);
        // subject 1 round 3: mean of round-2 values 20, 6, 7, 8
        assert_eq!(feedback(1, 3), 10.25);
        // control untouched
        let control = outcome
            .set
            .runs
            .iter()
            .find(|r| r.condition == Condition::Control)
            .unwrap();
        assert!(control.records.iter().all(|r| r.feedback_shown.is_none()));
    }

    #[test]
    fn export_yields_one_pair_per_round_with_growing_context() {
        let file = write_csv(&toy_csv());
        let mut outcome =
            ingest_human_csv(file.path(), &ColumnMap::default(), &QuestionBank::bundled()).unwrap();
        reconstruct_feedback(&mut outcome.set).unwrap();
        let bank = QuestionBank::bundled();

        let social = export_finetune_pairs(
            &outcome.set,
            &bank,
            Party::Dem,
            Condition::Social,
            Some(&[5]),
        )
        .unwrap();
        assert_eq!(social.pairs.len(), 15); // 5 subjects x 3 rounds
        assert!(social.excluded.is_empty());
        for pair in &social.pairs {
            let prompts = pair.context.iter().filter(|m| m.role == "user").count();
            let replies = pair.context.iter().filter(|m| m.role == "assistant").count();
            assert_eq!(prompts, pair.round as usize);
            assert_eq!(replies, pair.round as usize - 1);
            assert_eq!(pair.context.last().unwrap().role, "user");
            let messages = pair.messages();
            assert_eq!(messages.last().unwrap().role, "assistant");
            assert_eq!(messages.last().unwrap().content, pair.target);
        }
        // subject 1's round-2 prompt shows the reconstructed average
        let pair = social
            .pairs
            .iter()
            .find(|p| p.subject == "1" && p.round == 2)
            .unwrap();
        assert!(pair.context[2].content.contains("Their average answer: 6"));
        assert_eq!(pair.target, "My Final Answer: 50");

        let control = export_finetune_pairs(
            &outcome.set,
            &bank,
            Party::Dem,
            Condition::Control,
            Some(&[5]),
        )
        .unwrap();
        assert_eq!(control.pairs.len(), 6); // 2 subjects x 3 rounds
        for pair in &control.pairs {
            for message in &pair.context {
                assert!(!message.content.contains("other players"));
            }
        }
    }

    #[test]
    fn export_requires_reconstructed_feedback_for_social() {
        let file = write_csv(&toy_csv());
        let outcome =
            ingest_human_csv(file.path(), &ColumnMap::default(), &QuestionBank::bundled()).unwrap();
        let err = export_finetune_pairs(
            &outcome.set,
            &QuestionBank::bundled(),
            Party::Dem,
            Condition::Social,
            Some(&[5]),
        )
        .unwrap_err();
        assert!(matches!(err, HumanDataError::FeedbackNotReconstructed));
    }

    #[test]
    fn incomplete_trajectories_are_flagged_and_excluded() {
        // subject 3 has no round-3 estimate
        let text = toy_csv().replace("3,dem,social,g1,5,3,6,", "3,dem,social,g1,5,3,,");
        let file = write_csv(&text);
        let mut outcome =
            ingest_human_csv(file.path(), &ColumnMap::default(), &QuestionBank::bundled()).unwrap();
        assert_eq!(outcome.report.incomplete.len(), 1);
        assert_eq!(outcome.report.incomplete[0].subject, "3");
        assert!(outcome.report.incomplete[0].message.contains("2 of 3"));

        reconstruct_feedback(&mut outcome.set).unwrap();
        let export = export_finetune_pairs(
            &outcome.set,
            &QuestionBank::bundled(),
            Party::Dem,
            Condition::Social,
            Some(&[5]),
        )
        .unwrap();
        assert_eq!(export.pairs.len(), 12); // 4 complete subjects x 3
        assert_eq!(export.excluded.len(), 1);
        assert_eq!(export.excluded[0].subject, "3");
    }

    #[test]
    fn export_is_deterministic() {
        let file = write_csv(&toy_csv());
        let jsonl = || {
            let mut outcome =
                ingest_human_csv(file.path(), &ColumnMap::default(), &QuestionBank::bundled())
                    .unwrap();
            reconstruct_feedback(&mut outcome.set).unwrap();
            let export = export_finetune_pairs(
                &outcome.set,
                &QuestionBank::bundled(),
                Party::Dem,
                Condition::Social,
                Some(&[5]),
            )
            .unwrap();
            finetune_jsonl(&export.pairs)
        };
        let a = jsonl();
        assert_eq!(a, jsonl());
        let first_line: serde_json::Value =
            serde_json::from_str(a.lines().next().unwrap()).unwrap();
        assert_eq!(first_line["party"], "dem");
        assert_eq!(first_line["messages"][0]["role"], "user");
    }

    #[test]
    fn missing_required_column_is_a_schema_error() {
        let file = write_csv("subject,party,condition,group,question,estimate\n");
        let err = ingest_human_csv(file.path(), &ColumnMap::default(), &QuestionBank::bundled())
            .unwrap_err();
        assert!(matches!(err, HumanDataError::MissingColumn { column, .. } if column == "round"));
    }

    #[test]
    fn bad_rows_are_dropped_with_reasons() {
        let file = write_csv(
            "subject,party,condition,group,question,round,estimate,neighbors\n\
             1,green,social,g1,5,1,10,\n\
             2,dem,social,g1,99,1,10,\n\
             3,dem,social,g1,5,1,ten,\n\
             4,dem,control,g2,5,1,10,\n",
        );
        let outcome =
            ingest_human_csv(file.path(), &ColumnMap::default(), &QuestionBank::bundled()).unwrap();
        assert_eq!(outcome.report.records, 1);
        assert_eq!(outcome.report.dropped.len(), 3);
        let reasons: Vec<&str> = outcome
            .report
            .dropped
            .iter()
            .map(|d| d.message.as_str())
            .collect();
        assert!(reasons[0].contains("party"));
        assert!(reasons[1].contains("not in bank"));
        assert!(reasons[2].contains("estimate"));
    }

    #[test]
    fn custom_column_names_resolve() {
        let file = write_csv(
            "sid,lean,arm,grp,q,t,resp,peers\n\
             1,dem,control,a,5,1,10,\n",
        );
        let map = ColumnMap {
            subject: "sid".into(),
            party: "lean".into(),
            condition: "arm".into(),
            group: "grp".into(),
            question: "q".into(),
            round: "t".into(),
            estimate: "resp".into(),
            neighbors: "peers".into(),
        };
        let outcome = ingest_human_csv(file.path(), &map, &QuestionBank::bundled()).unwrap();
        assert_eq!(outcome.report.records, 1);
    }
}
