//! Experiment configuration: the raw deserialized form, validation, and the
//! canonical validated form consumed by the engine.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{sha256_hex, ModelError, PersonaDetail, Topology};

/// Parameters of the synthetic estimator backend.
///
/// Initial estimates are drawn as `truth * (1 + common_bias + d*bias_magnitude + noise)`
/// where `d` is +1 when the agent's party is favored by the question's bias
/// direction and -1 otherwise, and `noise ~ Normal(0, noise_sd^2)` truncated
/// at three standard deviations. Revisions weight the agent's previous answer
/// by `alpha_min + (alpha_max - alpha_min) * exp(-lambda * e_i)` with `e_i`
/// the agent's initial relative error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    /// Party-dependent relative shift b >= 0, applied along the question's
    /// bias direction with opposite sign for the two parties.
    pub bias_magnitude: f64,
    /// Party-independent relative shift shared by both parties. Zero keeps
    /// initial draws symmetric around the truth.
    pub common_bias: f64,
    /// Standard deviation of the relative noise term, >= 0.
    pub noise_sd: f64,
    /// Lower bound of the self-weight, in [0, 1].
    pub alpha_min: f64,
    /// Upper bound of the self-weight, in [0, 1].
    pub alpha_max: f64,
    /// Decay rate >= 0 mapping initial error to self-weight.
    pub lambda: f64,
}

impl Default for SyntheticParams {
    /// Defaults tuned so three-round social runs shrink group error by
    /// several points while control runs stay flat: wide noise seeds some
    /// near-truth anchors and the alpha range makes them stubborn.
    fn default() -> Self {
        Self {
            bias_magnitude: 0.5,
            common_bias: 0.0,
            noise_sd: 0.5,
            alpha_min: 0.05,
            alpha_max: 0.98,
            lambda: 1.5,
        }
    }
}

impl SyntheticParams {
    fn validate(&self) -> Result<(), ModelError> {
        let bounded01 = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.bias_magnitude >= 0.0) {
            return Err(ModelError::Config(
                "synthetic: bias_magnitude must be >= 0".into(),
            ));
        }
        if !self.common_bias.is_finite() {
            return Err(ModelError::Config(
                "synthetic: common_bias must be finite".into(),
            ));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(ModelError::Config("synthetic: noise_sd must be >= 0".into()));
        }
        if !bounded01(self.alpha_min) || !bounded01(self.alpha_max) {
            return Err(ModelError::Config(
                "synthetic: alpha bounds must lie in [0, 1]".into(),
            ));
        }
        if self.alpha_min > self.alpha_max {
            return Err(ModelError::Config(
                "synthetic: alpha_min must not exceed alpha_max".into(),
            ));
        }
        if !(self.lambda >= 0.0) {
            return Err(ModelError::Config("synthetic: lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Parameters of the transcript replay backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayParams {
    /// Store directory holding the transcripts to replay.
    pub source: PathBuf,
}

/// Cassette handling for the live chat backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CassetteMode {
    /// No cassette: every request goes to the endpoint.
    Off,
    /// Send requests to the endpoint and append request/response pairs.
    Record,
    /// Serve responses from the cassette; a miss is an error.
    Replay,
}

/// Parameters of the live chat-endpoint backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmParams {
    /// Chat-completion endpoint URL.
    pub endpoint: String,
    /// Model identifier sent with each request.
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    /// Retries after the first attempt on transient failures.
    pub max_retries: u32,
    /// Base delay for exponential backoff between retries.
    pub backoff_ms: u64,
    /// Minimum spacing between consecutive requests (rate ceiling).
    pub min_request_interval_ms: u64,
    /// Per-request timeout.
    pub timeout_secs: u64,
    /// Cassette file for record/replay testing.
    pub cassette: Option<PathBuf>,
    pub cassette_mode: CassetteMode,
}

impl Default for LlmParams {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "LLM_API_KEY".into(),
            max_retries: 2,
            backoff_ms: 500,
            min_request_interval_ms: 0,
            timeout_secs: 120,
            cassette: None,
            cassette_mode: CassetteMode::Off,
        }
    }
}

impl LlmParams {
    fn validate(&self) -> Result<(), ModelError> {
        if self.endpoint.is_empty() {
            return Err(ModelError::Config("llm: endpoint must not be empty".into()));
        }
        if self.api_key_env.is_empty() {
            return Err(ModelError::Config(
                "llm: api_key_env must not be empty".into(),
            ));
        }
        if self.cassette.is_none() && self.cassette_mode != CassetteMode::Off {
            return Err(ModelError::Config(
                "llm: cassette_mode requires a cassette path".into(),
            ));
        }
        Ok(())
    }
}

/// Which mechanism produces agent estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Synthetic(SyntheticParams),
    Replay(ReplayParams),
    Llm(LlmParams),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Synthetic(SyntheticParams::default())
    }
}

impl BackendConfig {
    /// Short tag used in filenames and log lines.
    pub fn kind(&self) -> &'static str {
        match self {
            BackendConfig::Synthetic(_) => "synthetic",
            BackendConfig::Replay(_) => "replay",
            BackendConfig::Llm(_) => "llm",
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        match self {
            BackendConfig::Synthetic(p) => p.validate(),
            BackendConfig::Replay(_) => Ok(()),
            BackendConfig::Llm(p) => p.validate(),
        }
    }
}

/// Configuration as read from a file or CLI flags, before validation.
/// Every field is optional; [`RawConfig::validate`] fills defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RawConfig {
    pub questions: Option<Vec<u8>>,
    pub persona_detail: Option<PersonaDetail>,
    pub cot: Option<bool>,
    pub induced_bias: Option<bool>,
    pub backend: Option<BackendConfig>,
    pub n_agents: Option<u32>,
    pub degree: Option<u32>,
    pub rounds: Option<u32>,
    pub runs_social: Option<u32>,
    pub runs_control: Option<u32>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
    pub topology: Option<Topology>,
}

impl RawConfig {
    /// Parse a TOML config file.
    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::Config(format!("config parse: {e}")))
    }

    /// Check invariants and fill defaults.
    pub fn validate(self) -> Result<ExperimentConfig, ModelError> {
        let questions = self.questions.unwrap_or_else(|| (1..=8).collect());
        if questions.is_empty() {
            return Err(ModelError::Config("empty question list".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &q in &questions {
            if !(1..=8).contains(&q) {
                return Err(ModelError::Config(format!(
                    "config: unknown question id {q}"
                )));
            }
            if !seen.insert(q) {
                return Err(ModelError::Config(format!(
                    "config: duplicate question id {q}"
                )));
            }
        }

        let n_agents = self.n_agents.unwrap_or(35);
        let degree = self.degree.unwrap_or(4);
        if degree < 1 || degree >= n_agents {
            return Err(ModelError::DegreeTooLarge { degree, n_agents });
        }
        let rounds = self.rounds.unwrap_or(3);
        if rounds < 2 {
            return Err(ModelError::TooFewRounds(rounds));
        }
        let runs_social = self.runs_social.unwrap_or(12);
        let runs_control = self.runs_control.unwrap_or(4);
        if runs_social < 1 || runs_control < 1 {
            return Err(ModelError::Config("run counts must be >= 1".into()));
        }
        let temperature = self.temperature.unwrap_or(0.7);
        if !(temperature >= 0.0) {
            return Err(ModelError::Config(
                "config: temperature must be >= 0".into(),
            ));
        }
        let topology = self.topology.unwrap_or(Topology::Ring);
        if topology == Topology::Imported {
            return Err(ModelError::Config(
                "config: imported topology is only produced by ingestion, not runnable".into(),
            ));
        }
        if topology == Topology::Ring && degree % 2 != 0 {
            return Err(ModelError::Config(
                "ring topology needs an even degree".into(),
            ));
        }
        let backend = self.backend.unwrap_or_default();
        backend.validate()?;

        Ok(ExperimentConfig {
            questions,
            persona_detail: self.persona_detail.unwrap_or(PersonaDetail::Detailed),
            cot: self.cot.unwrap_or(false),
            induced_bias: self.induced_bias.unwrap_or(false),
            backend,
            n_agents,
            degree,
            rounds,
            runs_social,
            runs_control,
            temperature,
            seed: self.seed.unwrap_or(0),
            topology,
        })
    }
}

/// Validated experiment configuration. Construct via [`RawConfig::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub questions: Vec<u8>,
    pub persona_detail: PersonaDetail,
    pub cot: bool,
    pub induced_bias: bool,
    pub backend: BackendConfig,
    pub n_agents: u32,
    pub degree: u32,
    pub rounds: u32,
    pub runs_social: u32,
    pub runs_control: u32,
    pub temperature: f64,
    pub seed: u64,
    pub topology: Topology,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        RawConfig::default()
            .validate()
            .expect("default config is valid")
    }
}

impl ExperimentConfig {
    /// Hash of the canonical JSON serialization. Stable across runs; used to
    /// name output directories and to detect config drift on resume.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())
    }
}
