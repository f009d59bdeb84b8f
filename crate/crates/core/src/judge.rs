//! The judging loop's tools: parsing verdict text, majority voting, hindsight
//! hint selection, and the two backend flavors (scripted rules and external
//! LLM endpoints) behind one interface.
//!
//! A judge reads a turn's action together with the next-state signal that
//! followed it and produces votes. Binary mode yields scores in {+1, -1, 0};
//! hint mode yields {+1, -1} plus an optional hindsight hint wrapped in
//! `[HINT_START]…[HINT_END]`. Everything downstream consumes parsed
//! [`Verdict`]s, so scripted and external backends are interchangeable.

use std::sync::Arc;
use std::sync::OnceLock;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Score, TurnRecord, Verdict};

/// Marker opening a hindsight hint in raw verdict text.
pub const HINT_START: &str = "[HINT_START]";
/// Marker closing a hindsight hint.
pub const HINT_END: &str = "[HINT_END]";
/// Minimum hint length (characters, strict) for a hint to be usable.
pub const MIN_HINT_LEN: usize = 10;

#[derive(Debug, Error)]
pub enum JudgeError {
    /// Hint-mode verdict with no usable boxed score; the vote is discarded.
    #[error("malformed verdict: {0}")]
    MalformedVerdict(String),
    /// External endpoint failed after bounded retries; the turn should be
    /// re-queued rather than dropped.
    #[error("judge backend unavailable: {0}")]
    BackendUnavailable(String),
}

/// Which verdict grammar the judge speaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    /// Scores in {+1, -1, 0}; unparseable text degrades to 0.
    Binary,
    /// Scores in {+1, -1} plus hints; unparseable text discards the vote.
    Opd,
}

/// Everything the judging loop needs to evaluate one finished turn.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeJob {
    pub session_id: String,
    /// The finished turn, with `next_state` set.
    pub turn: TurnRecord,
    /// Base seed for this job; vote i uses stream i of it.
    pub seed: u64,
    /// Delivery attempts so far (bumped on re-queue after backend failures).
    pub attempts: u32,
}

impl JudgeJob {
    pub fn next_state(&self) -> &str {
        self.turn.next_state.as_deref().unwrap_or("")
    }
}

// ───────────────────────── parsing ─────────────────────────

fn boxed_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\boxed\{\s*([+-]?\d+)\s*\}").expect("static regex"))
}

/// Extracts the hint between the first `[HINT_START]` and the first
/// `[HINT_END]` after it, verbatim.
fn extract_hint(raw: &str) -> Option<String> {
    let start = raw.find(HINT_START)? + HINT_START.len();
    let end = raw[start..].find(HINT_END)? + start;
    Some(raw[start..end].to_string())
}

/// Parses raw judge output into a [`Verdict`].
///
/// The score is the last `\boxed{…}` whose content parses as an integer; a
/// final boxed value outside the mode's score set counts as unparseable.
/// Binary mode degrades unparseable text to score 0; hint mode rejects it
/// with [`JudgeError::MalformedVerdict`] so the vote is dropped. Hints are
/// only kept on positive votes.
pub fn parse_verdict(raw: &str, mode: JudgeMode) -> Result<Verdict, JudgeError> {
    let last_int = boxed_regex()
        .captures_iter(raw)
        .filter_map(|c| c[1].parse::<i64>().ok())
        .last();

    let allowed: &[i64] = match mode {
        JudgeMode::Binary => &[1, -1, 0],
        JudgeMode::Opd => &[1, -1],
    };
    let score: Option<Score> = match last_int {
        Some(value) if allowed.contains(&value) => Some(value as Score),
        _ => None,
    };

    match (score, mode) {
        (Some(score), JudgeMode::Binary) => Ok(Verdict {
            score,
            hint: None,
            raw_text: raw.to_string(),
        }),
        (Some(score), JudgeMode::Opd) => Ok(Verdict {
            score,
            hint: if score == 1 { extract_hint(raw) } else { None },
            raw_text: raw.to_string(),
        }),
        (None, JudgeMode::Binary) => Ok(Verdict {
            score: 0,
            hint: None,
            raw_text: raw.to_string(),
        }),
        (None, JudgeMode::Opd) => Err(JudgeError::MalformedVerdict(raw.to_string())),
    }
}

/// The score with strictly the greatest count; any tie for the maximum
/// returns 0 (neutral).
pub fn majority_vote(votes: &[Score]) -> Score {
    assert!(!votes.is_empty(), "majority_vote needs at least one vote");
    let candidates: [Score; 3] = [1, -1, 0];
    let counts: Vec<usize> = candidates
        .iter()
        .map(|c| votes.iter().filter(|v| *v == c).count())
        .collect();
    let best = *counts.iter().max().expect("nonempty");
    let winners: Vec<Score> = candidates
        .iter()
        .zip(&counts)
        .filter(|(_, &count)| count == best)
        .map(|(&c, _)| c)
        .collect();
    if winners.len() == 1 {
        winners[0]
    } else {
        0
    }
}

/// Among positive votes whose hint is strictly longer than `min_len`
/// characters, picks the longest hint (the last wins on equal length).
/// Returns `None` when no hint qualifies, in which case the caller drops
/// the sample.
pub fn select_hint(verdicts: &[Verdict], min_len: usize) -> Option<String> {
    verdicts
        .iter()
        .filter(|v| v.score == 1)
        .filter_map(|v| v.hint.as_deref())
        .filter(|h| h.chars().count() > min_len)
        .max_by_key(|h| h.chars().count())
        .map(|h| h.to_string())
}

// ───────────────────────── backends ─────────────────────────

/// A deterministic rule set standing in for an LLM judge: it reads the job
/// (action text, next-state signal, context) and writes raw verdict text in
/// the same grammar an external judge would, which then flows through
/// [`parse_verdict`] like any other backend output.
pub trait VerdictScript: Send + Sync {
    fn id(&self) -> &str;
    fn raw_verdict(&self, job: &JudgeJob, mode: JudgeMode, rng: &mut ChaCha8Rng) -> String;
}

/// Configuration for an external chat-completion-style judge endpoint.
#[derive(Debug, Clone)]
pub struct ExternalJudgeConfig {
    pub url: String,
    pub api_key: String,
    /// System prompt template establishing the verdict grammar.
    pub prompt_template: String,
    /// Sampling temperature for judge queries.
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout: Duration,
}

impl ExternalJudgeConfig {
    pub fn new(url: impl Into<String>, api_key: impl Into<String>, template: impl Into<String>) -> Self {
        ExternalJudgeConfig {
            url: url.into(),
            api_key: api_key.into(),
            prompt_template: template.into(),
            temperature: 0.6,
            max_retries: 3,
            timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Clone)]
pub enum JudgeBackend {
    Scripted(Arc<dyn VerdictScript>),
    External(ExternalJudgeConfig),
}

impl JudgeBackend {
    pub fn scripted(script: Arc<dyn VerdictScript>) -> Self {
        JudgeBackend::Scripted(script)
    }

    pub fn describe(&self) -> String {
        match self {
            JudgeBackend::Scripted(s) => format!("scripted:{}", s.id()),
            JudgeBackend::External(c) => format!("external:{}", c.url),
        }
    }
}

/// Serializes the judge's view of a turn for external backends.
fn render_job(job: &JudgeJob) -> String {
    let mut out = String::new();
    out.push_str("[CONTEXT]\n");
    for message in &job.turn.request {
        out.push_str(&format!("{:?}: {}\n", message.role, message.content));
    }
    out.push_str("[ACTION]\n");
    out.push_str(&job.turn.response_text);
    out.push_str("\n[NEXT_STATE]\n");
    out.push_str(job.next_state());
    out
}

#[derive(Serialize)]
struct ExternalRequest<'a> {
    messages: Vec<ExternalMessage<'a>>,
    temperature: f64,
}

#[derive(Serialize)]
struct ExternalMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ExternalResponse {
    text: String,
}

fn call_external(config: &ExternalJudgeConfig, job: &JudgeJob) -> Result<String, JudgeError> {
    let rendered = render_job(job);
    let body = serde_json::to_string(&ExternalRequest {
        messages: vec![
            ExternalMessage {
                role: "system",
                content: &config.prompt_template,
            },
            ExternalMessage {
                role: "user",
                content: &rendered,
            },
        ],
        temperature: config.temperature,
    })
    .expect("request serializes");

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(config.timeout))
        .http_status_as_error(false)
        .build()
        .into();

    let mut last_error = String::new();
    for attempt in 0..config.max_retries.max(1) {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(50 * attempt as u64));
        }
        let result = agent
            .post(&config.url)
            .header("Authorization", &format!("Bearer {}", config.api_key))
            .header("Content-Type", "application/json")
            .send(body.as_bytes());
        match result {
            Ok(mut response) => {
                let status = response.status().as_u16();
                let text = response.body_mut().read_to_string().unwrap_or_default();
                if (200..300).contains(&status) {
                    match serde_json::from_str::<ExternalResponse>(&text) {
                        Ok(parsed) => return Ok(parsed.text),
                        Err(e) => last_error = format!("bad response body: {e}"),
                    }
                } else {
                    last_error = format!("status {status}");
                }
            }
            Err(e) => last_error = format!("transport: {e}"),
        }
    }
    Err(JudgeError::BackendUnavailable(last_error))
}

/// Runs `m` independent votes on one finished turn.
///
/// Scripted votes get independent random streams derived from the job seed;
/// external votes are independent sampled queries. Malformed hint-mode votes
/// are dropped, so the result may hold fewer than `m` verdicts in that mode.
/// External transport failure after retries surfaces as
/// [`JudgeError::BackendUnavailable`] and the whole job should be re-queued.
pub fn judge_turn(
    job: &JudgeJob,
    m: usize,
    backend: &JudgeBackend,
    mode: JudgeMode,
) -> Result<Vec<Verdict>, JudgeError> {
    assert!(m >= 1, "need at least one vote");
    let mut verdicts = Vec::with_capacity(m);
    for vote in 0..m {
        let raw = match backend {
            JudgeBackend::Scripted(script) => {
                let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
                rng.set_stream(vote as u64);
                script.raw_verdict(job, mode, &mut rng)
            }
            JudgeBackend::External(config) => call_external(config, job)?,
        };
        match parse_verdict(&raw, mode) {
            Ok(verdict) => verdicts.push(verdict),
            Err(JudgeError::MalformedVerdict(_)) => {} // dropped vote
            Err(other) => return Err(other),
        }
    }
    Ok(verdicts)
}
