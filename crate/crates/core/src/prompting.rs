//! Round prompt rendering and numeric answer parsing.
//!
//! Rendering is a pure function of its inputs and is pinned down to the byte
//! by golden-file tests; every placeholder substitution is recorded in the
//! returned bundle.

use std::collections::BTreeMap;
use std::ops::Range;

use thiserror::Error;

use crate::model::{Condition, Persona, Question};
use crate::Value;

const FINAL_ANSWER_MARKER: &str = "my final answer:";
const REASONING_MARKER: &str = "my reasoning:";

const SOCIAL_SETUP_MESSAGE: &str = "Keep in mind that it's a group game, played concurrently \
with other participants. After you submit your first answer, you'll be given the average of \
other players' initial responses. Following your second submission, you'll receive the average \
of their second-round responses.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt: round {round} outside 1..={total}")]
    RoundOutOfRange { round: u32, total: u32 },
    #[error("prompt: social round {0} requires feedback")]
    MissingFeedback(u32),
    #[error("prompt: feedback supplied where none is shown (round {round}, {condition})")]
    UnexpectedFeedback { round: u32, condition: Condition },
    #[error("prompt: unresolved placeholder in rendered text: {0}")]
    Unresolved(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no final-answer marker in response")]
    NoMarker,
    #[error("no parsable number after final-answer marker")]
    NoNumber,
    #[error("range answer rejected")]
    RangeAnswer,
}

/// A fully rendered prompt for one agent, round, and question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub round: u32,
    pub text: String,
    /// Placeholder name to substituted text, for audit.
    pub placeholders_resolved: BTreeMap<&'static str, String>,
}

/// Numeric estimate extracted from a response.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    /// Text between the reasoning marker and the final-answer marker, trimmed;
    /// empty when the response carries no reasoning.
    pub reasoning: String,
    pub value: Value,
    /// Byte range of the matched number within the raw response.
    pub matched_span: Range<usize>,
}

/// Render the prompt for one round of the three-trial script.
///
/// `feedback` must be present exactly when `round >= 2` and the condition is
/// Social. Induced-bias text is substituted only in round 1 and only when the
/// persona carries an entry for this question.
pub fn render_prompt(
    round: u32,
    persona: &Persona,
    question: &Question,
    condition: Condition,
    cot: bool,
    induced_bias: bool,
    feedback: Option<Value>,
) -> Result<PromptBundle, PromptError> {
    render_prompt_with_rounds(round, 3, persona, question, condition, cot, induced_bias, feedback)
}

/// [`render_prompt`] for a script of `total_rounds` trials. The round-1 text
/// states the trial count, so runs with a non-default round count use this
/// variant.
#[allow(clippy::too_many_arguments)]
pub fn render_prompt_with_rounds(
    round: u32,
    total_rounds: u32,
    persona: &Persona,
    question: &Question,
    condition: Condition,
    cot: bool,
    induced_bias: bool,
    feedback: Option<Value>,
) -> Result<PromptBundle, PromptError> {
    if round < 1 || round > total_rounds {
        return Err(PromptError::RoundOutOfRange {
            round,
            total: total_rounds,
        });
    }
    let feedback_due = condition == Condition::Social && round >= 2;
    match (feedback_due, feedback) {
        (true, None) => return Err(PromptError::MissingFeedback(round)),
        (false, Some(_)) => return Err(PromptError::UnexpectedFeedback { round, condition }),
        _ => {}
    }

    let mut resolved: BTreeMap<&'static str, String> = BTreeMap::new();
    let name = persona.name.clone();
    resolved.insert("AGENT_NAME", name.clone());
    resolved.insert("QUESTION_CONTENT", question.text.clone());

    let mut text = String::new();
    if round == 1 {
        let persona_text = persona.description();
        resolved.insert("AGENT_PERSONA", persona_text.clone());
        text.push_str("Role play this person.\n");
        text.push_str(&persona_text);
        text.push('\n');
        if induced_bias {
            if let Some(bias) = persona.induced_bias.get(&question.id) {
                resolved.insert("INDUCED_BIAS", bias.clone());
                text.push_str(bias);
                text.push('\n');
            }
        }
        text.push('\n');

        let setup = match condition {
            Condition::Social => format!("{SOCIAL_SETUP_MESSAGE} "),
            Condition::Control => String::new(),
        };
        resolved.insert("SOCIAL_SETUP_MESSAGE", setup.clone());
        let revisions = total_rounds - 1;
        let chances = if revisions == 1 { "chance" } else { "chances" };
        text.push_str(&format!(
            "Let's play a game where you'll be asked a single question, and you must provide \
             an answer. This game has {total_rounds} trials, allowing you {revisions} {chances} \
             to revise your response. {setup}At the end of the game, the more accurate your \
             final answer is compared to the actual truth, the more money you will earn.\n\n"
        ));
        text.push_str(&format!(
            "Now, {name}, in this {} round of the game, you are asked to answer the following \
             question.\n\n",
            ordinal(round)
        ));
    } else {
        text.push_str(&format!(
            "Now, {name}, in this {} round of the game, you are asked again to answer the \
             following question.\n\n",
            ordinal(round)
        ));
    }

    text.push_str(&question.text);
    text.push_str("\n\nYou must give an answer even if you are not sure.\n\n");

    if round >= 2 {
        if let Some(value) = feedback {
            let party = persona.party.label().to_string();
            let feedback_text = format_feedback(value);
            let message = format!(
                "This time, you are provided with other players in the first round of the \
                 game, who are all {party}. Their average answer: {feedback_text}"
            );
            resolved.insert("AGENT_PARTY", party);
            resolved.insert("FEEDBACK", feedback_text);
            resolved.insert("SOCIAL_FEEDBACK_MESSAGE", message.clone());
            text.push_str(&message);
            text.push_str("\n\n");
        } else {
            resolved.insert("SOCIAL_FEEDBACK_MESSAGE", String::new());
        }
    }

    text.push_str("Use the following format:\n");
    if cot {
        text.push_str(&format!("My Reasoning: [YOUR ({name}'s) REASONING]\n"));
    }
    text.push_str(&format!("My Final Answer: [YOUR ({name}'s) ESTIMATE (A REAL NUMBER)]"));

    if let Some(brace) = text.find(['{', '}']) {
        let tail: String = text[brace..].chars().take(30).collect();
        return Err(PromptError::Unresolved(tail));
    }
    Ok(PromptBundle {
        round,
        text,
        placeholders_resolved: resolved,
    })
}

/// Feedback values are printed with the shortest round-trip decimal form:
/// whole numbers drop the fraction ("6"), others keep it ("5.5").
pub fn format_feedback(value: Value) -> String {
    format!("{value}")
}

fn ordinal(n: u32) -> String {
    match n {
        1 => "first".into(),
        2 => "second".into(),
        3 => "third".into(),
        4 => "fourth".into(),
        5 => "fifth".into(),
        6 => "sixth".into(),
        7 => "seventh".into(),
        8 => "eighth".into(),
        9 => "ninth".into(),
        10 => "tenth".into(),
        _ => format!("{n}th"),
    }
}

/// Extract the numeric estimate from a raw response.
///
/// The last final-answer marker wins (case-insensitive); only the remainder
/// of that line is considered. Currency symbols and thousands separators are
/// stripped; a leading minus is accepted; percent signs and magnitude words
/// after the number are ignored without rescaling. Tight ranges like "4-5"
/// are rejected rather than guessed at.
pub fn parse_estimate(raw: &str) -> Result<ParsedResponse, ParseError> {
    let marker_pos = rfind_ascii_ci(raw, FINAL_ANSWER_MARKER).ok_or(ParseError::NoMarker)?;
    let after_marker = marker_pos + FINAL_ANSWER_MARKER.len();
    let rest = &raw[after_marker..];
    let line_end = rest.find('\n').unwrap_or(rest.len());
    let line = &rest[..line_end];

    // Positions survive the filter so the span can point into `raw`.
    let chars: Vec<(usize, char)> = line
        .char_indices()
        .filter(|&(_, c)| c != '$' && c != ',')
        .collect();

    let (start, end) = scan_number(&chars).ok_or(ParseError::NoNumber)?;
    if let Some(&(_, next)) = chars.get(end) {
        if next == '-' && chars.get(end + 1).is_some_and(|&(_, c)| c.is_ascii_digit()) {
            return Err(ParseError::RangeAnswer);
        }
    }

    let digits: String = chars[start..end].iter().map(|&(_, c)| c).collect();
    let value: Value = digits.parse().map_err(|_| ParseError::NoNumber)?;
    if !value.is_finite() {
        return Err(ParseError::NoNumber);
    }

    let span_start = after_marker + chars[start].0;
    let (last_pos, last_char) = chars[end - 1];
    let span_end = after_marker + last_pos + last_char.len_utf8();

    let reasoning = rfind_ascii_ci(&raw[..marker_pos], REASONING_MARKER)
        .map(|pos| raw[pos + REASONING_MARKER.len()..marker_pos].trim().to_string())
        .unwrap_or_default();

    Ok(ParsedResponse {
        reasoning,
        value,
        matched_span: span_start..span_end,
    })
}

/// First maximal `[-]?digits[.digits]` run; returns index bounds into `chars`.
fn scan_number(chars: &[(usize, char)]) -> Option<(usize, usize)> {
    let mut i = 0;
    while i < chars.len() {
        let mut k = i;
        if chars[k].1 == '-' {
            k += 1;
        }
        let int_start = k;
        while k < chars.len() && chars[k].1.is_ascii_digit() {
            k += 1;
        }
        let int_len = k - int_start;
        let mut frac_len = 0;
        if k < chars.len() && chars[k].1 == '.' {
            let mut f = k + 1;
            while f < chars.len() && chars[f].1.is_ascii_digit() {
                f += 1;
            }
            frac_len = f - (k + 1);
            if frac_len > 0 {
                k = f;
            }
        }
        if int_len + frac_len > 0 {
            return Some((i, k));
        }
        i += 1;
    }
    None
}

/// Last occurrence of an ASCII needle, case-insensitive. A window starting
/// inside a multi-byte char can never match an ASCII needle, so byte offsets
/// returned are always char boundaries.
fn rfind_ascii_ci(haystack: &str, needle: &str) -> Option<usize> {
    let h = haystack.as_bytes();
    let n = needle.as_bytes();
    if n.is_empty() || h.len() < n.len() {
        return None;
    }
    (0..=h.len() - n.len())
        .rev()
        .find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}
