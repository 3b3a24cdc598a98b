//! Bundled and file-loaded banks: questions, detailed personas, induced
//! biases.
//!
//! Bank files are human-editable TOML, one record per entry. The bundled
//! copies are embedded in the binary and immutable at runtime; a checksum over
//! the bundled question truths pins them against accidental edits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{ModelError, Party, Persona, PersonaDetail, Question};

pub const SIMPLE_DEM_BACKGROUND: &str = "A typical Democrat in the USA.";
pub const SIMPLE_REP_BACKGROUND: &str = "A typical Republican in the USA.";

/// SHA-256 over the bundled (id, truth, bias_sign) triples; guards the bank
/// against drift.
pub const BUNDLED_QUESTION_CHECKSUM: &str =
    "b20cf83f3dca9ab1b73aa4086dbdaae2d9fef129995622f70e74b145836db59e";

const BUNDLED_QUESTIONS: &str = include_str!("../../data/questions.toml");
const BUNDLED_PERSONAS: &str = include_str!("../../data/personas_detailed.toml");
const BUNDLED_BIASES: &str = include_str!("../../data/induced_biases.toml");

pub const DETAILED_PER_PARTY: usize = 35;

#[derive(Deserialize)]
struct QuestionFile {
    questions: Vec<Question>,
}

/// The eight estimation tasks with truths, bias signs, and extreme rules.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionBank {
    questions: Vec<Question>,
}

impl QuestionBank {
    pub fn bundled() -> QuestionBank {
        Self::parse(BUNDLED_QUESTIONS, "<bundled>").expect("bundled question bank is valid")
    }

    pub fn from_path(path: &Path) -> Result<QuestionBank, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    fn parse(text: &str, origin: &str) -> Result<QuestionBank, ModelError> {
        let file: QuestionFile = toml::from_str(text).map_err(|e| ModelError::Schema {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        Self::validate(&file.questions)?;
        Ok(QuestionBank {
            questions: file.questions,
        })
    }

    fn validate(questions: &[Question]) -> Result<(), ModelError> {
        if questions.len() != 8 {
            return Err(ModelError::QuestionCount {
                found: questions.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for q in questions {
            if !(1..=8).contains(&q.id) {
                return Err(ModelError::BadQuestion {
                    id: q.id,
                    message: "id must be in 1..=8".into(),
                });
            }
            if !seen.insert(q.id) {
                return Err(ModelError::BadQuestion {
                    id: q.id,
                    message: "duplicate id".into(),
                });
            }
            let expected_exp = if q.id <= 4 { 1 } else { 2 };
            if q.experiment != expected_exp {
                return Err(ModelError::BadQuestion {
                    id: q.id,
                    message: format!("experiment must be {expected_exp} for this id"),
                });
            }
            if !(-1..=1).contains(&q.bias_sign) {
                return Err(ModelError::BadQuestion {
                    id: q.id,
                    message: "bias_sign must be -1, 0, or +1".into(),
                });
            }
            if q.truth == 0.0 || !q.truth.is_finite() {
                return Err(ModelError::BadQuestion {
                    id: q.id,
                    message: "truth must be finite and nonzero".into(),
                });
            }
        }
        Ok(())
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn get(&self, id: u8) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    /// Hex SHA-256 over the (id, truth, bias_sign) triples in id order.
    pub fn checksum(&self) -> String {
        let mut sorted: Vec<&Question> = self.questions.iter().collect();
        sorted.sort_by_key(|q| q.id);
        let mut hasher = Sha256::new();
        for q in sorted {
            hasher.update(format!("{}:{}:{}\n", q.id, q.truth, q.bias_sign));
        }
        hex_digest(hasher)
    }
}

#[derive(Deserialize)]
struct PersonaFile {
    personas: Vec<Persona>,
}

/// Detailed persona roster, 35 per party.
#[derive(Debug, Clone)]
pub struct PersonaBank {
    personas: Vec<Persona>,
}

impl PersonaBank {
    pub fn bundled() -> PersonaBank {
        Self::parse(BUNDLED_PERSONAS, "<bundled>").expect("bundled persona bank is valid")
    }

    pub fn from_path(path: &Path) -> Result<PersonaBank, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    fn parse(text: &str, origin: &str) -> Result<PersonaBank, ModelError> {
        let file: PersonaFile = toml::from_str(text).map_err(|e| ModelError::Schema {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        Self::validate(&file.personas)?;
        Ok(PersonaBank {
            personas: file.personas,
        })
    }

    fn validate(personas: &[Persona]) -> Result<(), ModelError> {
        let mut names = BTreeSet::new();
        let mut per_party: BTreeMap<Party, usize> = BTreeMap::new();
        for p in personas {
            if p.detail != PersonaDetail::Detailed {
                return Err(ModelError::PersonaBank(format!(
                    "persona {} must be detailed",
                    p.name
                )));
            }
            if p.leaning.is_none() || p.occupation.is_none() {
                return Err(ModelError::PersonaBank(format!(
                    "persona {} is missing template fields",
                    p.name
                )));
            }
            if !names.insert((p.party, p.name.clone())) {
                return Err(ModelError::PersonaBank(format!(
                    "duplicate persona name {}",
                    p.name
                )));
            }
            *per_party.entry(p.party).or_default() += 1;
        }
        for party in Party::ALL {
            let n = per_party.get(&party).copied().unwrap_or(0);
            if n != DETAILED_PER_PARTY {
                return Err(ModelError::PersonaBank(format!(
                    "need {DETAILED_PER_PARTY} detailed {party} personas, found {n}"
                )));
            }
        }
        Ok(())
    }

    /// All detailed personas of one party, bank order.
    pub fn detailed(&self, party: Party) -> Vec<&Persona> {
        self.personas.iter().filter(|p| p.party == party).collect()
    }

    pub fn all(&self) -> &[Persona] {
        &self.personas
    }
}

#[derive(Deserialize)]
struct BiasFile {
    biases: Vec<BiasEntry>,
}

#[derive(Deserialize)]
struct BiasEntry {
    question: u8,
    party: Party,
    text: String,
}

/// Belief sentences injected per (question, party) when bias is induced.
#[derive(Debug, Clone)]
pub struct InducedBiasBank {
    entries: BTreeMap<(u8, Party), String>,
}

impl InducedBiasBank {
    pub fn bundled() -> InducedBiasBank {
        Self::parse(BUNDLED_BIASES, "<bundled>").expect("bundled bias bank is valid")
    }

    pub fn from_path(path: &Path) -> Result<InducedBiasBank, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    fn parse(text: &str, origin: &str) -> Result<InducedBiasBank, ModelError> {
        let file: BiasFile = toml::from_str(text).map_err(|e| ModelError::Schema {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        let mut entries = BTreeMap::new();
        for e in file.biases {
            if !(1..=8).contains(&e.question) {
                return Err(ModelError::BiasBank(format!(
                    "question {} out of range",
                    e.question
                )));
            }
            if entries.insert((e.question, e.party), e.text).is_some() {
                return Err(ModelError::BiasBank(format!(
                    "duplicate entry for question {} / {}",
                    e.question, e.party
                )));
            }
        }
        Ok(InducedBiasBank { entries })
    }

    pub fn get(&self, question: u8, party: Party) -> Option<&str> {
        self.entries.get(&(question, party)).map(String::as_str)
    }

    /// Question ids that carry a bias for at least one party.
    pub fn question_ids(&self) -> BTreeSet<u8> {
        self.entries.keys().map(|(q, _)| *q).collect()
    }
}

fn hex_digest(hasher: Sha256) -> String {
    let bytes = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hex SHA-256 of arbitrary bytes; shared by config and store hashing.
pub(crate) fn sha256_hex(data: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data);
    hex_digest(hasher)
}
