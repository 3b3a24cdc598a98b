//! Replay backend: serves previously recorded estimates verbatim.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::model::{Condition, EstimateRecord, Party};
use crate::prompting::PromptBundle;
use crate::Value;

use super::{AgentBackend, AgentError, AgentState, Reply, RoundInput};

type ReplayKey = (Party, Condition, u32, u8, u32, u32);

/// Replays a recorded transcript bit-exactly; every lookup miss is an error
/// rather than a fabricated answer.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    records: BTreeMap<ReplayKey, (Option<Value>, String)>,
}

impl ReplayBackend {
    pub fn new(records: impl IntoIterator<Item = EstimateRecord>) -> ReplayBackend {
        let records = records
            .into_iter()
            .map(|r| {
                (
                    (r.party, r.condition, r.run, r.question, r.round, r.agent),
                    (r.value, r.raw_text),
                )
            })
            .collect();
        ReplayBackend { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl AgentBackend for ReplayBackend {
    fn reply(
        &mut self,
        state: &mut AgentState,
        _prompt: &PromptBundle,
        input: &RoundInput<'_>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Reply, AgentError> {
        let key = (
            state.persona.party,
            state.condition,
            input.run,
            input.question.id,
            input.round,
            state.agent,
        );
        let (value, raw_text) = self.records.get(&key).cloned().ok_or_else(|| {
            AgentError::ReplayMiss(format!(
                "{} {} run {} q{} round {} agent {}",
                key.0, key.1, key.2, key.3, key.4, key.5
            ))
        })?;
        Ok(Reply { raw_text, value })
    }
}
