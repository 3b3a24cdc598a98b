//! Agent backends behind one contract: synthetic accuracy-weighted averaging,
//! recorded-transcript replay, and live chat-endpoint role play.
//!
//! A backend maps (agent state, rendered prompt, round input) to a reply.
//! [`respond`] wraps that exchange: it renders the round prompt, collects the
//! reply, extends the agent's memory, and assembles the estimate record.

mod cassette;
mod llm;
mod replay;
mod synthetic;

pub use cassette::{Cassette, CassetteEntry};
pub use llm::{ChatMessage, LlmBackend};
pub use replay::ReplayBackend;
pub use synthetic::{
    initial_value, partisan_direction, revised_value, sample_noise, self_weight,
    synthetic_initial, synthetic_update, SyntheticBackend,
};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{Condition, EstimateRecord, Persona, Question};
use crate::prompting::{render_prompt_with_rounds, PromptBundle, PromptError};
use crate::Value;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("agent {agent}: memory holds {memory} pairs entering round {round}")]
    OutOfStep { agent: u32, round: u32, memory: usize },
    #[error("agent {agent}: no previous estimate to revise in round {round}")]
    MissingPrevious { agent: u32, round: u32 },
    #[error("replay: no recorded response for {0}")]
    ReplayMiss(String),
    #[error("llm: endpoint rejected credentials ({0})")]
    Auth(String),
    #[error("llm: rate limit still exhausted after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("llm: request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("llm: transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("llm: endpoint error {status}: {message}")]
    Endpoint { status: u16, message: String },
    #[error("llm: api key environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("cassette: no recorded response for request {key}")]
    CassetteMiss { key: String },
    #[error("cassette: {0}")]
    Cassette(String),
}

/// Per-agent state for one (run, question) cell. Memory is scoped to that
/// cell; the engine builds fresh states when the question changes.
#[derive(Debug, Clone)]
pub struct AgentState {
    /// 1-based index within the run.
    pub agent: u32,
    pub persona: Persona,
    pub condition: Condition,
    /// (prompt, response) pairs, one per completed round.
    pub memory: Vec<(String, String)>,
    /// Most recent parsed estimate; survives a failed parse so revisions
    /// build on the last good value.
    pub last_value: Option<Value>,
    /// Round-1 estimate.
    pub initial_value: Option<Value>,
    /// Synthetic self-weight, fixed at the end of round 1.
    pub alpha: Option<Value>,
}

impl AgentState {
    pub fn new(agent: u32, persona: Persona, condition: Condition) -> AgentState {
        AgentState {
            agent,
            persona,
            condition,
            memory: Vec::new(),
            last_value: None,
            initial_value: None,
            alpha: None,
        }
    }

    /// Clear everything the next question must not see.
    pub fn reset(&mut self) {
        self.memory.clear();
        self.last_value = None;
        self.initial_value = None;
        self.alpha = None;
    }
}

/// Everything a backend may consult for one round beyond the agent state.
#[derive(Debug, Clone)]
pub struct RoundInput<'a> {
    pub question: &'a Question,
    /// 1-based run index.
    pub run: u32,
    /// 1-based round index.
    pub round: u32,
    pub total_rounds: u32,
    pub cot: bool,
    pub induced_bias: bool,
    pub temperature: f64,
    /// Peer average to show; present iff Social and round >= 2.
    pub feedback: Option<Value>,
    /// True when the feedback is the agent's own previous estimate because
    /// every neighbor value was missing.
    pub feedback_imputed: bool,
}

/// Backend output for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub raw_text: String,
    /// Parsed estimate; `None` records a parse failure.
    pub value: Option<Value>,
}

/// One backend implementation. `rng` is only consulted by the synthetic
/// backend; replies are deterministic for a fixed rng stream.
pub trait AgentBackend {
    fn reply(
        &mut self,
        state: &mut AgentState,
        prompt: &PromptBundle,
        input: &RoundInput<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Reply, AgentError>;
}

/// Run one round for one agent: render the prompt, collect the backend reply,
/// extend memory by exactly one pair, and assemble the record.
pub fn respond(
    backend: &mut dyn AgentBackend,
    state: &mut AgentState,
    input: &RoundInput<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<EstimateRecord, AgentError> {
    if state.memory.len() + 1 != input.round as usize {
        return Err(AgentError::OutOfStep {
            agent: state.agent,
            round: input.round,
            memory: state.memory.len(),
        });
    }
    let prompt = render_prompt_with_rounds(
        input.round,
        input.total_rounds,
        &state.persona,
        input.question,
        state.condition,
        input.cot,
        input.induced_bias,
        input.feedback,
    )?;
    let reply = backend.reply(state, &prompt, input, rng)?;
    state.memory.push((prompt.text, reply.raw_text.clone()));
    if input.round == 1 {
        state.initial_value = reply.value;
    }
    if reply.value.is_some() {
        state.last_value = reply.value;
    }
    Ok(EstimateRecord {
        agent: state.agent,
        party: state.persona.party,
        condition: state.condition,
        run: input.run,
        round: input.round,
        question: input.question.id,
        value: reply.value,
        raw_text: reply.raw_text,
        feedback_shown: input.feedback,
        feedback_imputed: input.feedback_imputed,
        extreme: false,
        source_id: None,
    })
}
