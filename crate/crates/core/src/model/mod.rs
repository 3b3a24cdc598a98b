//! Domain types, bundled banks, and experiment configuration.

mod bank;
mod config;

pub use bank::{
    InducedBiasBank, PersonaBank, QuestionBank, BUNDLED_QUESTION_CHECKSUM, SIMPLE_DEM_BACKGROUND,
    SIMPLE_REP_BACKGROUND,
};
pub(crate) use bank::sha256_hex;
pub use config::{
    BackendConfig, CassetteMode, ExperimentConfig, LlmParams, RawConfig, ReplayParams,
    SyntheticParams,
};

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Value;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed bank file {path}: {message}")]
    Schema { path: String, message: String },
    #[error("expected 8 questions, found {found}")]
    QuestionCount { found: usize },
    #[error("question {id}: {message}")]
    BadQuestion { id: u8, message: String },
    #[error("persona bank: {0}")]
    PersonaBank(String),
    #[error("induced-bias bank: {0}")]
    BiasBank(String),
    #[error("config: degree too large ({degree} must be smaller than {n_agents} agents)")]
    DegreeTooLarge { degree: u32, n_agents: u32 },
    #[error("config: protocol needs >=2 rounds, got {0}")]
    TooFewRounds(u32),
    #[error("config: {0}")]
    Config(String),
}

/// Political leaning of an agent or group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Dem,
    Rep,
}

impl Party {
    pub const ALL: [Party; 2] = [Party::Dem, Party::Rep];

    /// Noun used in prompts ("who are all Democrat/Republican").
    pub fn label(self) -> &'static str {
        match self {
            Party::Dem => "Democrat",
            Party::Rep => "Republican",
        }
    }

    /// Prefix for generic agent names: `d_1`, `r_1`.
    pub fn name_prefix(self) -> &'static str {
        match self {
            Party::Dem => "d",
            Party::Rep => "r",
        }
    }

    /// +1 for Rep, -1 for Dem; orients partisan shifts against `bias_sign`.
    pub fn direction(self) -> i8 {
        match self {
            Party::Dem => -1,
            Party::Rep => 1,
        }
    }

    pub fn other(self) -> Party {
        match self {
            Party::Dem => Party::Rep,
            Party::Rep => Party::Dem,
        }
    }
}

impl std::fmt::Display for Party {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Party::Dem => "dem",
            Party::Rep => "rep",
        })
    }
}

/// Experimental arm: peers' average shown from round 2 on, or never.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Social,
    Control,
}

impl Condition {
    pub const ALL: [Condition; 2] = [Condition::Social, Condition::Control];
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Condition::Social => "social",
            Condition::Control => "control",
        })
    }
}

/// How much identity backstory an agent carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaDetail {
    Simple,
    Detailed,
}

/// Interaction graph wiring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Circulant lattice: node i linked to i±1, i±2, ... (k/2 hops each way).
    Ring,
    /// Seeded random k-regular graph (pairing model with retry).
    Random4Regular,
    /// Adjacency taken verbatim from an external dataset.
    Imported,
}

/// Rule deciding whether a response is outside the realistic range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtremeRule {
    /// Extreme when value > factor x truth, or negative.
    TruthMultiple { factor: Value },
    /// Extreme when value falls outside [min, max]; either bound optional.
    Range {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<Value>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<Value>,
    },
}

impl ExtremeRule {
    pub fn is_extreme(&self, truth: Value, value: Value) -> bool {
        match *self {
            ExtremeRule::TruthMultiple { factor } => value > factor * truth || value < 0.0,
            ExtremeRule::Range { min, max } => {
                min.is_some_and(|lo| value < lo) || max.is_some_and(|hi| value > hi)
            }
        }
    }
}

/// One of the eight estimation tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: u8,
    /// 1 for ids 1-4, 2 for ids 5-8.
    pub experiment: u8,
    pub text: String,
    /// Free-form unit note; all arithmetic is unit-agnostic.
    pub unit: String,
    /// Ground truth, never zero.
    pub truth: Value,
    /// +1: Republicans typically estimate higher; -1: Democrats; 0: no
    /// expected difference.
    pub bias_sign: i8,
    pub extreme_rule: ExtremeRule,
}

/// Where a persona entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaSource {
    /// Transcribed verbatim from the released subset.
    #[default]
    Published,
    /// Authored here from the same field template to fill the bank to 35.
    Generated,
}

/// An agent identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub name: String,
    pub party: Party,
    #[serde(default = "detail_detailed")]
    pub detail: PersonaDetail,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ethnicity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub education: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occupation: Option<String>,
    pub background: String,
    #[serde(default)]
    pub source: PersonaSource,
    /// Per-question belief sentences, present only when the run induces bias.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub induced_bias: BTreeMap<u8, String>,
}

fn detail_detailed() -> PersonaDetail {
    PersonaDetail::Detailed
}

impl Persona {
    /// Generic persona for the simple condition; `index` is 1-based.
    pub fn simple(party: Party, index: u32) -> Persona {
        Persona {
            name: format!("{}_{}", party.name_prefix(), index),
            party,
            detail: PersonaDetail::Simple,
            leaning: None,
            age: None,
            gender: None,
            ethnicity: None,
            education: None,
            occupation: None,
            background: match party {
                Party::Dem => SIMPLE_DEM_BACKGROUND.to_string(),
                Party::Rep => SIMPLE_REP_BACKGROUND.to_string(),
            },
            source: PersonaSource::Published,
            induced_bias: BTreeMap::new(),
        }
    }

    /// Text substituted for the persona placeholder in round-1 prompts.
    pub fn description(&self) -> String {
        match self.detail {
            PersonaDetail::Simple => self.background.clone(),
            PersonaDetail::Detailed => {
                let mut out = String::new();
                out.push_str(&format!("Name: {}\n", self.name));
                if let Some(leaning) = &self.leaning {
                    out.push_str(&format!("Political leaning: {leaning}\n"));
                }
                if let Some(age) = self.age {
                    out.push_str(&format!("Age: {age}\n"));
                }
                if let Some(gender) = &self.gender {
                    out.push_str(&format!("Gender: {gender}\n"));
                }
                if let Some(ethnicity) = &self.ethnicity {
                    out.push_str(&format!("Ethnicity: {ethnicity}\n"));
                }
                if let Some(education) = &self.education {
                    out.push_str(&format!("Education: {education}\n"));
                }
                if let Some(occupation) = &self.occupation {
                    out.push_str(&format!("Occupation: {occupation}\n"));
                }
                out.push_str(&format!("Background: {}", self.background));
                out
            }
        }
    }

    pub fn with_induced_bias(mut self, bank: &InducedBiasBank, questions: &[u8]) -> Persona {
        for &q in questions {
            if let Some(text) = bank.get(q, self.party) {
                self.induced_bias.insert(q, text.to_string());
            }
        }
        self
    }
}

/// One estimate from one agent in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    /// 1-based agent index within the run.
    pub agent: u32,
    pub party: Party,
    pub condition: Condition,
    /// 1-based run index.
    pub run: u32,
    /// 1-based round index.
    pub round: u32,
    pub question: u8,
    /// Parsed estimate; absent when the response was unparseable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    pub raw_text: String,
    /// Peer average shown this round (Social, round >= 2 only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_shown: Option<Value>,
    /// True when all neighbors were missing and the agent's own previous
    /// estimate was reused as feedback.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub feedback_imputed: bool,
    /// Set by the metrics pass, never by the engine.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub extreme: bool,
    /// External subject id for ingested human data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
}
