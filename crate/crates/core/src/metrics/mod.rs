//! Metric suite over transcript sets: normalized group error, error
//! reduction, the Social-minus-Control wisdom effect, conditional partisan
//! bias, and the extreme-response filter.
//!
//! All error quantities are reported in percentage points (x100). Extreme and
//! missing estimates are excluded before any mean is taken; a (group, round)
//! slot with nothing left is undefined and is skipped by every aggregate,
//! with the normalizer shrunk to match.

mod report;

pub use report::{per_question_csv, per_round_csv, render_text_table, to_json};

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::engine::TranscriptSet;
use crate::model::{Condition, EstimateRecord, Party, Question, QuestionBank};
use crate::scalar::{cast, Scalar};
use crate::Value;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics: normalized error undefined for truth 0")]
    ZeroTruth,
    #[error("metrics: question {0} has truth 0, normalized error undefined")]
    ZeroTruthQuestion(u8),
    #[error("metrics: records name question {0}, which the bank does not hold")]
    UnknownQuestion(u8),
    #[error("metrics: record round {round} outside 1..={rounds}")]
    RoundOutOfRange { round: u32, rounds: u32 },
    #[error("metrics: {condition} condition has only {present} records; bias needs both parties")]
    MissingParty {
        condition: Condition,
        present: Party,
    },
}

/// Mean of the included estimates for one (group, round) slot. Exclusion of
/// extremes and missing values happens before this call; `None` marks an
/// undefined slot.
pub fn group_mean<S: Scalar>(values: &[S]) -> Option<S> {
    crate::scalar::mean(values)
}

/// Absolute deviation of a group mean from the ground truth, relative to the
/// truth's magnitude, in percentage points.
pub fn normalized_group_error<S: Scalar>(mean: S, truth: S) -> Result<S, MetricsError> {
    if truth == S::zero() {
        return Err(MetricsError::ZeroTruth);
    }
    Ok((mean - truth).abs() / truth.abs() * cast(100.0))
}

/// Social-condition average error reduction minus Control's; more negative
/// means observing peers helped more.
pub fn wisdom_effect<S: Scalar>(delta_social: S, delta_control: S) -> S {
    delta_social - delta_control
}

/// Combined partisan bias: arithmetic mean of the two condition biases.
pub fn overall_bias<S: Scalar>(bias_social: S, bias_control: S) -> S {
    (bias_social + bias_control) / cast(2.0)
}

/// Whether an estimate falls outside the question's realistic range.
pub fn classify_extreme(question: &Question, value: Value) -> bool {
    question.extreme_rule.is_extreme(question.truth, value)
}

/// One group's identity: every round of one (party, condition, run, question)
/// trajectory.
pub type CellKey = (Party, Condition, u32, u8);

/// Per-round normalized group errors for every group in a set, with the
/// exclusion filter already applied.
#[derive(Debug, Clone)]
pub struct ErrorTable {
    rounds: u32,
    /// Distinct question ids present, ascending.
    questions: Vec<u8>,
    /// Human-divergence sign per question.
    signs: BTreeMap<u8, i8>,
    /// Cell -> per-round error; `None` marks an undefined (round, group) slot.
    cells: BTreeMap<CellKey, Vec<Option<Value>>>,
    /// Question -> (records seen, records excluded as extreme or missing).
    question_counts: BTreeMap<u8, (usize, usize)>,
    total_records: usize,
    extreme_records: usize,
    missing_records: usize,
}

impl ErrorTable {
    /// Classify, exclude, and reduce raw records to per-round group errors.
    pub fn build<'a>(
        records: impl IntoIterator<Item = &'a EstimateRecord>,
        bank: &QuestionBank,
        rounds: u32,
    ) -> Result<ErrorTable, MetricsError> {
        let mut included: BTreeMap<CellKey, Vec<Vec<Value>>> = BTreeMap::new();
        let mut seen_cells: BTreeSet<CellKey> = BTreeSet::new();
        let mut question_counts: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
        let mut total = 0;
        let mut extreme = 0;
        let mut missing = 0;

        for record in records {
            let question = bank
                .get(record.question)
                .ok_or(MetricsError::UnknownQuestion(record.question))?;
            if record.round == 0 || record.round > rounds {
                return Err(MetricsError::RoundOutOfRange {
                    round: record.round,
                    rounds,
                });
            }
            total += 1;
            let key = (record.party, record.condition, record.run, record.question);
            seen_cells.insert(key);
            let counts = question_counts.entry(record.question).or_insert((0, 0));
            counts.0 += 1;
            // A non-finite value cannot come from a store (JSON has no NaN);
            // treat it like a missing estimate anyway.
            match record.value.filter(|v| v.is_finite()) {
                None => {
                    missing += 1;
                    counts.1 += 1;
                }
                Some(v) if classify_extreme(question, v) => {
                    extreme += 1;
                    counts.1 += 1;
                }
                Some(v) => included
                    .entry(key)
                    .or_insert_with(|| vec![Vec::new(); rounds as usize])
                    [(record.round - 1) as usize]
                    .push(v),
            }
        }

        let mut cells = BTreeMap::new();
        let mut signs = BTreeMap::new();
        let mut questions = BTreeSet::new();
        for key in seen_cells {
            let question = bank.get(key.3).expect("validated above");
            if question.truth == 0.0 {
                return Err(MetricsError::ZeroTruthQuestion(question.id));
            }
            questions.insert(question.id);
            signs.insert(question.id, question.bias_sign);
            let per_round = match included.get(&key) {
                Some(buckets) => buckets
                    .iter()
                    .map(|values| {
                        group_mean(values)
                            .map(|m| normalized_group_error(m, question.truth))
                            .transpose()
                    })
                    .collect::<Result<Vec<Option<Value>>, _>>()?,
                None => vec![None; rounds as usize],
            };
            cells.insert(key, per_round);
        }

        Ok(ErrorTable {
            rounds,
            questions: questions.into_iter().collect(),
            signs,
            cells,
            question_counts,
            total_records: total,
            extreme_records: extreme,
            missing_records: missing,
        })
    }

    pub fn from_set(set: &TranscriptSet, bank: &QuestionBank) -> Result<ErrorTable, MetricsError> {
        ErrorTable::build(set.records(), bank, set.config.rounds)
    }

    pub fn rounds(&self) -> u32 {
        self.rounds
    }

    pub fn questions(&self) -> &[u8] {
        &self.questions
    }

    /// Normalized group error for one cell at one round, if defined.
    pub fn error(&self, key: &CellKey, round: u32) -> Option<Value> {
        *self.cells.get(key)?.get((round - 1) as usize)?
    }

    /// (round, group) slots with no included estimates; coverage diagnostic.
    pub fn undefined_slots(&self) -> usize {
        self.cells
            .values()
            .flat_map(|per_round| per_round.iter())
            .filter(|e| e.is_none())
            .count()
    }

    pub fn total_records(&self) -> usize {
        self.total_records
    }

    pub fn extreme_records(&self) -> usize {
        self.extreme_records
    }

    pub fn missing_records(&self) -> usize {
        self.missing_records
    }

    /// Share of responses excluded as extreme or missing, in percent.
    pub fn extreme_percent(&self) -> Value {
        if self.total_records == 0 {
            return 0.0;
        }
        100.0 * (self.extreme_records + self.missing_records) as Value
            / self.total_records as Value
    }

    /// Share of responses with no parseable estimate at all, in percent.
    pub fn missing_percent(&self) -> Value {
        if self.total_records == 0 {
            return 0.0;
        }
        100.0 * self.missing_records as Value / self.total_records as Value
    }

    /// Excluded share for one question, in percent.
    pub fn question_extreme_percent(&self, question: u8) -> Value {
        match self.question_counts.get(&question) {
            Some(&(total, excluded)) if total > 0 => 100.0 * excluded as Value / total as Value,
            _ => 0.0,
        }
    }

    fn cells_in(
        &self,
        condition: Condition,
        question: Option<u8>,
    ) -> impl Iterator<Item = (&CellKey, &Vec<Option<Value>>)> {
        self.cells.iter().filter(move |(key, _)| {
            key.1 == condition && question.map_or(true, |q| key.3 == q)
        })
    }

    /// Unweighted mean error over every (party, run, question) group of the
    /// condition at one round; undefined slots are skipped.
    pub fn avg_error(
        &self,
        condition: Condition,
        round: u32,
        question: Option<u8>,
    ) -> Option<Value> {
        let values: Vec<Value> = self
            .cells_in(condition, question)
            .filter_map(|(_, per_round)| per_round[(round - 1) as usize])
            .collect();
        group_mean(&values)
    }

    /// Final-round error minus round-1 error for one cell; negative means the
    /// group improved.
    pub fn error_reduction(&self, key: &CellKey) -> Option<Value> {
        let per_round = self.cells.get(key)?;
        Some(per_round[(self.rounds - 1) as usize]? - per_round[0]?)
    }

    /// Unweighted mean error reduction over the condition's groups; cells
    /// undefined at either end are skipped.
    pub fn avg_error_reduction(&self, condition: Condition, question: Option<u8>) -> Option<Value> {
        let values: Vec<Value> = self
            .cells_in(condition, question)
            .filter_map(|(key, _)| self.error_reduction(key))
            .collect();
        group_mean(&values)
    }

    /// Signed Republican-minus-Democrat error gap, oriented by each
    /// question's human divergence sign, averaged over every (round,
    /// question, Rep run, Dem run) tuple with both errors defined.
    ///
    /// `Ok(None)` when the condition has no records or no defined tuple;
    /// an error when exactly one party is present.
    pub fn partisan_bias(
        &self,
        condition: Condition,
        question: Option<u8>,
    ) -> Result<Option<Value>, MetricsError> {
        let mut rep_runs: BTreeSet<u32> = BTreeSet::new();
        let mut dem_runs: BTreeSet<u32> = BTreeSet::new();
        for (key, _) in self.cells_in(condition, question) {
            match key.0 {
                Party::Rep => rep_runs.insert(key.2),
                Party::Dem => dem_runs.insert(key.2),
            };
        }
        match (rep_runs.is_empty(), dem_runs.is_empty()) {
            (true, true) => return Ok(None),
            (true, false) => {
                return Err(MetricsError::MissingParty {
                    condition,
                    present: Party::Dem,
                })
            }
            (false, true) => {
                return Err(MetricsError::MissingParty {
                    condition,
                    present: Party::Rep,
                })
            }
            (false, false) => {}
        }

        let questions: Vec<u8> = match question {
            Some(q) => vec![q],
            None => self.questions.clone(),
        };
        let mut sum = 0.0;
        let mut tuples = 0u64;
        for round in 1..=self.rounds {
            for &q in &questions {
                let sign = Value::from(self.signs[&q]);
                for &rep_run in &rep_runs {
                    let rep = self.error(&(Party::Rep, condition, rep_run, q), round);
                    let Some(rep) = rep else { continue };
                    for &dem_run in &dem_runs {
                        let dem = self.error(&(Party::Dem, condition, dem_run, q), round);
                        let Some(dem) = dem else { continue };
                        sum += (rep - dem) * sign;
                        tuples += 1;
                    }
                }
            }
        }
        if tuples == 0 {
            return Ok(None);
        }
        Ok(Some(sum / tuples as Value))
    }
}

/// Mean error per condition and round, for error-over-time curves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundErrorPoint {
    pub condition: Condition,
    pub round: u32,
    pub error: Value,
}

/// The headline metric columns, overall or for one question.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub delta_eps_social: Option<Value>,
    pub delta_eps_control: Option<Value>,
    pub delta_eps_s_minus_c: Option<Value>,
    pub bias_social: Option<Value>,
    pub bias_control: Option<Value>,
    pub bias_avg: Option<Value>,
}

/// Per-question slice of the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuestionBreakdown {
    pub question: u8,
    #[serde(flatten)]
    pub row: MetricsRow,
    pub extreme_pct: Value,
    pub per_round_error: Vec<RoundErrorPoint>,
}

/// Every metric over one transcript set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub row: MetricsRow,
    /// Percent of responses excluded as extreme or missing.
    pub extreme_pct: Value,
    /// Percent excluded for missing alone; subset of `extreme_pct`.
    pub missing_pct: Value,
    pub total_records: usize,
    pub extreme_records: usize,
    pub missing_records: usize,
    /// (round, group) slots left with no included estimates.
    pub undefined_slots: usize,
    pub per_round_error: Vec<RoundErrorPoint>,
    pub per_question: Vec<QuestionBreakdown>,
}

impl MetricsReport {
    /// Mean error for one condition and round, if any group defined it.
    pub fn per_round(&self, condition: Condition, round: u32) -> Option<Value> {
        self.per_round_error
            .iter()
            .find(|p| p.condition == condition && p.round == round)
            .map(|p| p.error)
    }
}

fn metrics_row(table: &ErrorTable, question: Option<u8>) -> Result<MetricsRow, MetricsError> {
    let delta_eps_social = table.avg_error_reduction(Condition::Social, question);
    let delta_eps_control = table.avg_error_reduction(Condition::Control, question);
    let delta_eps_s_minus_c = match (delta_eps_social, delta_eps_control) {
        (Some(s), Some(c)) => Some(wisdom_effect(s, c)),
        _ => None,
    };
    let bias_social = table.partisan_bias(Condition::Social, question)?;
    let bias_control = table.partisan_bias(Condition::Control, question)?;
    let bias_avg = match (bias_social, bias_control) {
        (Some(s), Some(c)) => Some(overall_bias(s, c)),
        _ => None,
    };
    Ok(MetricsRow {
        delta_eps_social,
        delta_eps_control,
        delta_eps_s_minus_c,
        bias_social,
        bias_control,
        bias_avg,
    })
}

fn round_curve(table: &ErrorTable, question: Option<u8>) -> Vec<RoundErrorPoint> {
    let mut points = Vec::new();
    for condition in Condition::ALL {
        for round in 1..=table.rounds() {
            if let Some(error) = table.avg_error(condition, round, question) {
                points.push(RoundErrorPoint {
                    condition,
                    round,
                    error,
                });
            }
        }
    }
    points
}

/// Assemble the full report from a built table.
pub fn report_from_table(table: &ErrorTable) -> Result<MetricsReport, MetricsError> {
    let mut per_question = Vec::new();
    for &q in table.questions() {
        per_question.push(QuestionBreakdown {
            question: q,
            row: metrics_row(table, Some(q))?,
            extreme_pct: table.question_extreme_percent(q),
            per_round_error: round_curve(table, Some(q)),
        });
    }
    Ok(MetricsReport {
        row: metrics_row(table, None)?,
        extreme_pct: table.extreme_percent(),
        missing_pct: table.missing_percent(),
        total_records: table.total_records(),
        extreme_records: table.extreme_records(),
        missing_records: table.missing_records(),
        undefined_slots: table.undefined_slots(),
        per_round_error: round_curve(table, None),
        per_question,
    })
}

/// Classify extremes, exclude them, and compute every metric for a set.
pub fn full_report(set: &TranscriptSet, bank: &QuestionBank) -> Result<MetricsReport, MetricsError> {
    report_from_table(&ErrorTable::from_set(set, bank)?)
}

/// Compute every metric directly from records.
pub fn report_from_records<'a>(
    records: impl IntoIterator<Item = &'a EstimateRecord>,
    bank: &QuestionBank,
    rounds: u32,
) -> Result<MetricsReport, MetricsError> {
    report_from_table(&ErrorTable::build(records, bank, rounds)?)
}
