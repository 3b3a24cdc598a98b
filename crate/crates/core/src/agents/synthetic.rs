//! Synthetic estimator: partisan-shifted noisy initial draws, then
//! accuracy-weighted averaging toward peer feedback.
//!
//! Initial estimates land at `truth * (1 + common_bias + d*bias_magnitude + noise)`
//! where `d` orients the party against the question's bias direction. Social
//! revisions mix the previous answer with the peer average using a self-weight
//! that grows with initial accuracy; Control agents hold their first answer,
//! the simplest null model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::{Condition, Party, SyntheticParams};
use crate::prompting::{format_feedback, PromptBundle, PromptError};
use crate::scalar::{cast, Scalar};
use crate::Value;

use super::{AgentBackend, AgentError, AgentState, Reply, RoundInput};

/// +bias direction for Rep, -bias direction for Dem, so Republicans land
/// above Democrats exactly when the question's bias sign is +1.
pub fn partisan_direction(party: Party, bias_sign: i8) -> i8 {
    party.direction() * bias_sign
}

/// Initial-draw kernel: `truth * (1 + common_bias + direction*bias_magnitude + noise)`.
pub fn initial_value<S: Scalar>(
    truth: S,
    direction: i8,
    bias_magnitude: S,
    common_bias: S,
    noise: S,
) -> S {
    truth * (S::one() + common_bias + cast::<S>(f64::from(direction)) * bias_magnitude + noise)
}

/// Self-weight from initial accuracy: `alpha_min + (alpha_max - alpha_min) * exp(-lambda * e)`
/// with `e = |initial - truth| / |truth|`. More accurate agents move less.
pub fn self_weight<S: Scalar>(
    initial: S,
    truth: S,
    alpha_min: S,
    alpha_max: S,
    lambda: S,
) -> S {
    let e = ((initial - truth) / truth).abs();
    alpha_min + (alpha_max - alpha_min) * (-lambda * e).exp()
}

/// Revision kernel: convex mix `alpha*prev + (1-alpha)*peer_avg`.
pub fn revised_value<S: Scalar>(prev: S, peer_avg: S, alpha: S) -> S {
    alpha * prev + (S::one() - alpha) * peer_avg
}

/// Normal(0, sd^2) truncated at three standard deviations by resampling.
pub fn sample_noise(sd: Value, rng: &mut ChaCha8Rng) -> Value {
    if sd == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, sd).expect("noise_sd validated nonnegative");
    let bound = 3.0 * sd;
    for _ in 0..1000 {
        let eta = normal.sample(rng);
        if eta.abs() <= bound {
            return eta;
        }
    }
    // Rejection probability per draw is ~0.27%; reaching here is effectively
    // impossible, but stay total.
    bound * if rng.random::<bool>() { 1.0 } else { -1.0 }
}

/// Draw one agent's round-1 estimate.
pub fn synthetic_initial(
    truth: Value,
    party: Party,
    bias_sign: i8,
    params: &SyntheticParams,
    rng: &mut ChaCha8Rng,
) -> Value {
    let noise = sample_noise(params.noise_sd, rng);
    initial_value(
        truth,
        partisan_direction(party, bias_sign),
        params.bias_magnitude,
        params.common_bias,
        noise,
    )
}

/// Revise toward peer feedback with a fixed self-weight.
pub fn synthetic_update(prev: Value, peer_avg: Value, alpha: Value) -> Value {
    revised_value(prev, peer_avg, alpha)
}

/// Backend wrapping the kernels. Echoes each value in the answer format so
/// replies stay parseable like any other backend's.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    params: SyntheticParams,
}

impl SyntheticBackend {
    pub fn new(params: SyntheticParams) -> SyntheticBackend {
        SyntheticBackend { params }
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }
}

impl AgentBackend for SyntheticBackend {
    fn reply(
        &mut self,
        state: &mut AgentState,
        _prompt: &PromptBundle,
        input: &RoundInput<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Reply, AgentError> {
        let truth = input.question.truth;
        let value = if input.round == 1 {
            let v = synthetic_initial(
                truth,
                state.persona.party,
                input.question.bias_sign,
                &self.params,
                rng,
            );
            state.alpha = Some(self_weight(
                v,
                truth,
                self.params.alpha_min,
                self.params.alpha_max,
                self.params.lambda,
            ));
            v
        } else {
            let prev = state.last_value.ok_or(AgentError::MissingPrevious {
                agent: state.agent,
                round: input.round,
            })?;
            match state.condition {
                Condition::Control => prev,
                Condition::Social => {
                    let feedback = input
                        .feedback
                        .ok_or(PromptError::MissingFeedback(input.round))?;
                    let alpha = state.alpha.ok_or(AgentError::MissingPrevious {
                        agent: state.agent,
                        round: input.round,
                    })?;
                    synthetic_update(prev, feedback, alpha)
                }
            }
        };
        Ok(Reply {
            raw_text: format!("My Final Answer: {}", format_feedback(value)),
            value: Some(value),
        })
    }
}
