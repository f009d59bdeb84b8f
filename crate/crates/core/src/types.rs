//! Domain types shared by every loop: messages, turns, samples, verdicts.
//!
//! Values of these types cross loop boundaries by being cloned into queues,
//! so they are all plain owned data with no interior mutability.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into the fixed vocabulary. Valid ids satisfy `id < V`.
pub type TokenId = usize;

/// Verdict score: +1 (positive), -1 (negative), 0 (neutral / unparseable).
pub type Score = i32;

/// Who said a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

/// One message of conversational or environmental context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Self::new(Role::Tool, content)
    }
}

/// Whether a turn is trainable.
///
/// Main-line turns are the agent's primary responses; the next request on the
/// session carries their next-state signal and they become training data.
/// Side turns (auxiliary or memory-style queries) are served and stored for
/// replay but never judged or trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    MainLine,
    Side,
}

/// One served turn: the request context, the generated response, and the
/// rollout-time evidence the trainer needs later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// Index within the session, per kind: main-line turns count 0,1,2,..
    /// and side turns count independently.
    pub index: usize,
    pub kind: TurnKind,
    /// The full request context this turn was generated from.
    pub request: Vec<Message>,
    pub response_tokens: Vec<TokenId>,
    pub response_text: String,
    /// Per-token log-probabilities at temperature 1 under the generating
    /// snapshot. Same length as `response_tokens`.
    pub old_log_probs: Vec<f64>,
    /// The reaction observed after this response (user reply or environment
    /// result). Unset until the next request on the session arrives.
    pub next_state: Option<String>,
    /// Version of the snapshot that generated the response.
    pub policy_version: u64,
}

/// Which advantage construction produced a sample (and, at the pipeline
/// level, which reward route a run uses).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    Binary,
    Opd,
    Combined,
    Stepwise,
}

impl AdvantageMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdvantageMode::Binary => "binary",
            AdvantageMode::Opd => "opd",
            AdvantageMode::Combined => "combined",
            AdvantageMode::Stepwise => "stepwise",
        }
    }
}

impl std::str::FromStr for AdvantageMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(AdvantageMode::Binary),
            "opd" => Ok(AdvantageMode::Opd),
            "combined" => Ok(AdvantageMode::Combined),
            "stepwise" => Ok(AdvantageMode::Stepwise),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

/// The trainable unit flowing from the judge loop to the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub session_id: String,
    pub turn_index: usize,
    pub prompt_tokens: Vec<TokenId>,
    pub response_tokens: Vec<TokenId>,
    /// Rollout-time log-probs; the PPO ratio denominator and KL reference.
    pub old_log_probs: Vec<f64>,
    /// Per-token advantage, same length as the response.
    pub advantage: Vec<f64>,
    /// Version of the snapshot that generated the response.
    pub policy_version: u64,
    pub source: AdvantageMode,
}

impl Sample {
    /// Checks the structural invariants every constructed sample must hold.
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.response_tokens.len() != self.old_log_probs.len()
            || self.response_tokens.len() != self.advantage.len()
        {
            return Err(CoreError::SampleShape {
                tokens: self.response_tokens.len(),
                log_probs: self.old_log_probs.len(),
                advantage: self.advantage.len(),
            });
        }
        if self.response_tokens.is_empty() {
            return Err(CoreError::EmptyResponse);
        }
        if !self.advantage.iter().all(|a| a.is_finite()) {
            return Err(CoreError::NonFiniteAdvantage);
        }
        Ok(())
    }
}

/// One judge vote: a score and, in hint mode, the extracted hindsight hint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub score: Score,
    /// Present only on positive votes in hint (distillation) mode.
    pub hint: Option<String>,
    /// The raw backend text the verdict was parsed from, kept for records.
    pub raw_text: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoreError {
    /// No main-line turn is awaiting a next-state signal (first request of a
    /// session, or the pending turn was already linked).
    #[error("no main-line turn awaiting a next-state signal")]
    NoPendingTurn,
    #[error("sample shape mismatch: {tokens} tokens, {log_probs} log-probs, {advantage} advantages")]
    SampleShape {
        tokens: usize,
        log_probs: usize,
        advantage: usize,
    },
    #[error("sample has an empty response")]
    EmptyResponse,
    #[error("sample advantage contains a non-finite entry")]
    NonFiniteAdvantage,
}
