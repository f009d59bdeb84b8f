//! Desk-scale environments that drive the serving loop as ordinary HTTP
//! clients: a scripted student persona whose replies carry evaluative and
//! directive style feedback, a multi-step verifiable toy task whose replies
//! carry per-step success evidence, and the scripted judge rules that read
//! those replies back out.
//!
//! Personas judge style over surface token features (marker words, length,
//! casual words, a clean finish), so their preferences are decidable without
//! a model in the loop. Directive replies embed a machine-readable
//! `hint: …` segment whose trailing words are steering-cue tokens, which is
//! what makes hint-enhanced teacher contexts genuinely predictive.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, ChatResponse};
use crate::judge::VerdictScript;
use crate::policy::{PolicyParams, Vocabulary, EOS};
use crate::sync::derive_seed;
use crate::types::{Message, TokenId};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("bad world spec: {0}")]
    Config(String),
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("gateway request failed: {0}")]
    Gateway(String),
}

// ───────────────────────── token feature sets ─────────────────────────

pub const MARKER_WORDS: [&str; 8] = [
    "overview", "summary", "firstly", "furthermore", "moreover", "heading", "bullet", "formally",
];

pub const CASUAL_WORDS: [&str; 8] = [
    "hey", "yeah", "cool", "gotcha", "fine", "lol", "btw", "anyway",
];

pub const STEERING_CUE_WORDS: [&str; 8] = [
    "casual", "short", "plain", "direct", "polite", "specific", "friendly", "simple",
];

fn ids_of(vocab: &Vocabulary, words: &[&str]) -> Vec<TokenId> {
    words.iter().filter_map(|w| vocab.id_of(w)).collect()
}

// ───────────────────────── persona ─────────────────────────

/// A style rule the agent can break, in the order the persona complains
/// about them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    UsedMarkers,
    TooLong,
    NotCasual,
    NoCleanFinish,
}

impl Violation {
    /// The corrective hint a directive reply carries. Trailing words are
    /// steering-cue vocabulary so an enhanced context ends on them.
    pub fn directive_hint(self) -> &'static str {
        match self {
            Violation::UsedMarkers => "skip the marker words keep it casual plain",
            Violation::TooLong => "cut the length way down keep it short simple",
            Violation::NotCasual => "talk to me direct casual friendly",
            Violation::NoCleanFinish => "finish the thought then stop keep it short direct",
        }
    }

    /// The complaint a reply opens with when this rule is broken.
    pub fn complaint(self) -> &'static str {
        match self {
            Violation::UsedMarkers => "no way that sounds like a bot",
            Violation::TooLong => "too long i zoned out",
            Violation::NotCasual => "that reads stiff not like me",
            Violation::NoCleanFinish => "you trailed off mid thought",
        }
    }
}

const APPROVAL_REPLY: &str = "cool thanks that reads nice";

/// A scripted user with a decidable style preference over response tokens
/// and templated reactions.
#[derive(Debug, Clone)]
pub struct Persona {
    pub id: String,
    pub marker_tokens: Vec<TokenId>,
    pub casual_tokens: Vec<TokenId>,
    /// Longest acceptable visible response, in tokens.
    pub response_budget: usize,
    /// Probability that a complaint also names the broken rule as a hint.
    pub p_directive: f64,
    pub require_clean_finish: bool,
}

impl Persona {
    /// The homework student: hates structured "assistant" style, wants
    /// short, casual replies that end cleanly.
    pub fn student(vocab: &Vocabulary) -> Persona {
        Persona {
            id: "student".into(),
            marker_tokens: ids_of(vocab, &MARKER_WORDS),
            casual_tokens: ids_of(vocab, &CASUAL_WORDS),
            response_budget: 10,
            p_directive: 0.75,
            require_clean_finish: true,
        }
    }

    /// Response tokens with a trailing end-of-sequence stripped: what the
    /// user actually reads.
    fn visible<'a>(&self, tokens: &'a [TokenId]) -> &'a [TokenId] {
        match tokens.split_last() {
            Some((&last, rest)) if last == EOS => rest,
            _ => tokens,
        }
    }

    /// Every broken rule, in complaint order.
    pub fn violations(&self, tokens: &[TokenId]) -> Vec<Violation> {
        let visible = self.visible(tokens);
        let ended_cleanly = tokens.last() == Some(&EOS);
        let mut broken = Vec::new();
        if visible.iter().any(|t| self.marker_tokens.contains(t)) {
            broken.push(Violation::UsedMarkers);
        }
        if visible.len() > self.response_budget {
            broken.push(Violation::TooLong);
        }
        if !visible.iter().any(|t| self.casual_tokens.contains(t)) {
            broken.push(Violation::NotCasual);
        }
        if self.require_clean_finish && !ended_cleanly {
            broken.push(Violation::NoCleanFinish);
        }
        broken
    }

    pub fn satisfied(&self, tokens: &[TokenId]) -> bool {
        self.violations(tokens).is_empty()
    }

    fn sub_preference_count(&self) -> usize {
        if self.require_clean_finish {
            4
        } else {
            3
        }
    }
}

/// The homework prompt for problem `index`; integer-arithmetic filler whose
/// words all tokenize.
pub fn problem_prompt(index: usize) -> String {
    let digit = index % 10;
    if index % 2 == 0 {
        format!("now solve problem {digit}")
    } else {
        format!("next question {digit} please answer")
    }
}

/// The persona reads the response and reacts: approval when every rule
/// holds, otherwise a complaint that with probability `p_directive` also
/// names the broken rule as a `hint: …` segment. The reply always appends
/// the next homework prompt.
pub fn persona_step(
    persona: &Persona,
    history: &[Message],
    response_tokens: &[TokenId],
    rng: &mut ChaCha8Rng,
) -> Message {
    let asked_so_far = history
        .iter()
        .filter(|m| m.role == crate::types::Role::User)
        .count();
    let next_prompt = problem_prompt(asked_so_far);

    let broken = persona.violations(response_tokens);
    let text = match broken.first() {
        None => format!("{APPROVAL_REPLY}\n{next_prompt}"),
        Some(&violation) => {
            let directive = rng.gen::<f64>() < persona.p_directive;
            if directive {
                format!(
                    "{} try again hint: {}\n{next_prompt}",
                    violation.complaint(),
                    violation.directive_hint()
                )
            } else {
                format!("{} try again\n{next_prompt}", violation.complaint())
            }
        }
    };
    Message::user(text)
}

/// Fraction of sub-preferences the first response satisfies, snapped to
/// {0, 0.25, 0.5, 0.75, 1}. The problem text is carried for interface
/// completeness; the rubric is style-only.
pub fn personalization_score(
    persona: &Persona,
    _problem: &str,
    first_response_tokens: &[TokenId],
) -> f64 {
    let total = persona.sub_preference_count();
    let broken = persona.violations(first_response_tokens).len();
    let satisfied = total - broken;
    let quarters = (satisfied as f64 / total as f64 * 4.0).round() as i32;
    f64::from(quarters) / 4.0
}

// ───────────────────────── scripted judges ─────────────────────────

const COMPLAINT_MARKERS: [&str; 5] = [
    "sounds like a bot",
    "too long",
    "reads stiff",
    "trailed off",
    "try again",
];
const APPROVAL_MARKERS: [&str; 2] = ["cool thanks", "reads nice"];

/// Binary judge for persona traffic: reads the user's reaction and votes
/// on the turn that provoked it.
#[derive(Debug, Default)]
pub struct StudentReactionJudge;

impl VerdictScript for StudentReactionJudge {
    fn id(&self) -> &str {
        "student-reaction"
    }

    fn raw_verdict(
        &self,
        job: &crate::judge::JudgeJob,
        _mode: crate::judge::JudgeMode,
        _rng: &mut ChaCha8Rng,
    ) -> String {
        let reaction = job.next_state();
        if COMPLAINT_MARKERS.iter().any(|m| reaction.contains(m)) {
            "the user pushed back on that reply \\boxed{-1}".into()
        } else if APPROVAL_MARKERS.iter().any(|m| reaction.contains(m)) {
            "the user sounded satisfied \\boxed{1}".into()
        } else {
            "no clear reaction either way \\boxed{0}".into()
        }
    }
}

/// Hindsight judge: accepts the turn for distillation iff the reaction
/// carries a directive `hint: …` segment, and extracts it verbatim.
#[derive(Debug, Default)]
pub struct HindsightHintJudge;

/// The `hint: …` payload of a directive reply: everything after the first
/// `hint:` up to the end of that line.
pub fn extract_directive_hint(reaction: &str) -> Option<&str> {
    let start = reaction.find("hint:")? + "hint:".len();
    let rest = &reaction[start..];
    let end = rest.find('\n').unwrap_or(rest.len());
    let hint = rest[..end].trim();
    (!hint.is_empty()).then_some(hint)
}

impl VerdictScript for HindsightHintJudge {
    fn id(&self) -> &str {
        "hindsight-hint"
    }

    fn raw_verdict(
        &self,
        job: &crate::judge::JudgeJob,
        _mode: crate::judge::JudgeMode,
        _rng: &mut ChaCha8Rng,
    ) -> String {
        match extract_directive_hint(job.next_state()) {
            Some(hint) => format!("\\boxed{{1}} [HINT_START]{hint}[HINT_END]"),
            None => "no useful hindsight here \\boxed{-1}".into(),
        }
    }
}

/// Step checker for the toy task: votes on the per-step evidence in the
/// environment reply, with optional per-vote flip noise so majority voting
/// has something to denoise.
#[derive(Debug)]
pub struct StepCheckJudge {
    pub flip_prob: f64,
}

impl Default for StepCheckJudge {
    fn default() -> Self {
        StepCheckJudge { flip_prob: 0.0 }
    }
}

impl VerdictScript for StepCheckJudge {
    fn id(&self) -> &str {
        "step-check"
    }

    fn raw_verdict(
        &self,
        job: &crate::judge::JudgeJob,
        _mode: crate::judge::JudgeMode,
        rng: &mut ChaCha8Rng,
    ) -> String {
        let evidence = job.next_state();
        let mut sign: i32 = if evidence.contains("wrong") { -1 } else { 1 };
        if rng.gen::<f64>() < self.flip_prob {
            sign = -sign;
        }
        if sign > 0 {
            "the step checks out \\boxed{1}".into()
        } else {
            "the step looks wrong \\boxed{-1}".into()
        }
    }
}

// ───────────────────────── toy multi-step task ─────────────────────────

/// A fixed target sequence the policy must echo digit by digit: step `t`
/// succeeds iff the response contains target `t` as its first digit token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTask {
    pub id: String,
    pub horizon: usize,
    pub branching: usize,
    /// Target digit per step, each in `0..branching`.
    pub targets: Vec<u8>,
}

impl ToyTask {
    pub fn generate(id: impl Into<String>, horizon: usize, branching: usize, seed: u64) -> ToyTask {
        assert!(horizon >= 2, "a multi-step task needs at least two steps");
        assert!((2..=10).contains(&branching));
        let id = id.into();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["task", &id]));
        let targets = (0..horizon)
            .map(|_| rng.gen_range(0..branching) as u8)
            .collect();
        ToyTask {
            id,
            horizon,
            branching,
            targets,
        }
    }

    pub fn first_prompt(&self) -> String {
        format!("task start now solve {}", self.targets[0])
    }
}

#[derive(Debug, Clone)]
pub struct ToyEnvState {
    pub step: usize,
    pub achieved: usize,
    pub done: bool,
}

impl ToyEnvState {
    pub fn new() -> Self {
        ToyEnvState {
            step: 0,
            achieved: 0,
            done: false,
        }
    }
}

impl Default for ToyEnvState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    pub step: usize,
    pub action: Option<u8>,
    pub correct: bool,
}

/// The first digit token in the response, as the action.
pub fn extract_action(vocab: &Vocabulary, tokens: &[TokenId]) -> Option<u8> {
    tokens.iter().find_map(|&t| {
        vocab
            .word_of(t)
            .ok()
            .filter(|w| w.len() == 1)
            .and_then(|w| w.parse::<u8>().ok())
    })
}

/// One deterministic environment transition. The reply text carries the
/// step's success or failure evidence and, unless the episode just ended,
/// the next step's prompt.
pub fn toy_env_step(
    task: &ToyTask,
    state: &mut ToyEnvState,
    action_tokens: &[TokenId],
    vocab: &Vocabulary,
) -> Result<(String, bool, StepRecord), WorldError> {
    if state.done {
        return Err(WorldError::EpisodeFinished);
    }
    let target = task.targets[state.step];
    let action = extract_action(vocab, action_tokens);
    let correct = action == Some(target);
    let record = StepRecord {
        step: state.step,
        action,
        correct,
    };
    if correct {
        state.achieved += 1;
    }
    state.step += 1;
    state.done = state.step == task.horizon;

    let marker = if correct {
        "ok step done"
    } else {
        "wrong step failed"
    };
    let text = if state.done {
        format!(
            "{marker} all finished total {} of {}",
            state.achieved, task.horizon
        )
    } else {
        format!("{marker} now solve {}", task.targets[state.step])
    };
    Ok((text, state.done, record))
}

/// Trajectory outcome: 1 iff every step hit its target.
pub fn toy_env_outcome(task: &ToyTask, state: &ToyEnvState) -> f64 {
    assert!(state.done, "outcome is defined on complete trajectories");
    if state.achieved == task.horizon {
        1.0
    } else {
        0.0
    }
}

// ───────────────────────── initial policies ─────────────────────────

/// Strengths for the untrained personal-track policy: a structured
/// "assistant voice" prior plus the context weights that make steering cues
/// and style momentum meaningful.
#[derive(Debug, Clone, Copy)]
pub struct PersonalPolicyKnobs {
    /// Added to every marker-token bias: the untrained voice.
    pub marker_bias: f64,
    pub eos_bias: f64,
    /// Weight of steering-cue context tokens: cues suppress markers and
    /// boost casual words and stopping.
    pub steer: f64,
    /// Style persistence: markers follow markers, casual follows casual.
    pub momentum: f64,
}

impl Default for PersonalPolicyKnobs {
    fn default() -> Self {
        PersonalPolicyKnobs {
            marker_bias: 3.0,
            eos_bias: 0.0,
            steer: 4.0,
            momentum: 1.5,
        }
    }
}

/// The untrained personal-track policy: talks like a structured assistant
/// (marker tokens dominate), but already understands steering cues, so a
/// hint-enhanced context shifts its next-token distribution toward the
/// casual style the persona wants.
pub fn initial_personal_policy(vocab: &Vocabulary, k: usize, knobs: PersonalPolicyKnobs) -> PolicyParams {
    let mut params = PolicyParams::zeros(vocab.size(), k);
    let markers = ids_of(vocab, &MARKER_WORDS);
    let casual = ids_of(vocab, &CASUAL_WORDS);
    let cues = ids_of(vocab, &STEERING_CUE_WORDS);

    for &m in &markers {
        params.bias[m] += knobs.marker_bias;
    }
    params.bias[EOS] += knobs.eos_bias;

    for slot in 0..k {
        for &cue in &cues {
            for &m in &markers {
                *params.ctx_mut(slot, cue, m) -= knobs.steer;
            }
            for &c in &casual {
                *params.ctx_mut(slot, cue, c) += knobs.steer;
            }
            *params.ctx_mut(slot, cue, EOS) += knobs.steer * 0.5;
        }
    }
    // Style persists from the immediately preceding token.
    for &m in &markers {
        for &m2 in &markers {
            *params.ctx_mut(0, m, m2) += knobs.momentum;
        }
    }
    for &c in &casual {
        for &c2 in &casual {
            *params.ctx_mut(0, c, c2) += knobs.momentum;
        }
        *params.ctx_mut(0, c, EOS) += knobs.momentum;
    }
    params
}

/// The untrained step-task policy: prefers emitting action digits and
/// stopping, uniformly wrong about which digit.
pub fn initial_stepwise_policy(vocab: &Vocabulary, k: usize, branching: usize) -> PolicyParams {
    let mut params = PolicyParams::zeros(vocab.size(), k);
    for d in 0..branching {
        if let Some(t) = vocab.id_of(&d.to_string()) {
            params.bias[t] += 2.0;
        }
    }
    params.bias[EOS] += 1.0;
    params
}

// ───────────────────────── world specification ─────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    Personal,
    Stepwise,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonaSpec {
    #[serde(default = "default_persona_id")]
    pub id: String,
    #[serde(default = "default_response_budget")]
    pub response_budget: usize,
    #[serde(default = "default_p_directive")]
    pub p_directive: f64,
    #[serde(default = "default_true")]
    pub require_clean_finish: bool,
}

fn default_persona_id() -> String {
    "student".into()
}
fn default_response_budget() -> usize {
    10
}
fn default_p_directive() -> f64 {
    0.75
}
fn default_true() -> bool {
    true
}

impl Default for PersonaSpec {
    fn default() -> Self {
        PersonaSpec {
            id: default_persona_id(),
            response_budget: default_response_budget(),
            p_directive: default_p_directive(),
            require_clean_finish: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_branching")]
    pub branching: usize,
}

fn default_horizon() -> usize {
    4
}
fn default_branching() -> usize {
    4
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            horizon: default_horizon(),
            branching: default_branching(),
        }
    }
}

/// Plain-text config for one world: which environment, how many client
/// instances, and their rule parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    pub kind: WorldKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default)]
    pub persona: PersonaSpec,
    #[serde(default)]
    pub task: TaskSpec,
}

fn default_instances() -> usize {
    8
}

impl WorldSpec {
    pub fn from_toml_str(text: &str) -> Result<WorldSpec, WorldError> {
        let spec: WorldSpec = toml::from_str(text).map_err(|e| WorldError::Config(e.to_string()))?;
        if spec.instances == 0 {
            return Err(WorldError::Config("instances must be >= 1".into()));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<WorldSpec, WorldError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WorldError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn build_persona(&self, vocab: &Vocabulary) -> Persona {
        Persona {
            id: self.persona.id.clone(),
            marker_tokens: ids_of(vocab, &MARKER_WORDS),
            casual_tokens: ids_of(vocab, &CASUAL_WORDS),
            response_budget: self.persona.response_budget,
            p_directive: self.persona.p_directive,
            require_clean_finish: self.persona.require_clean_finish,
        }
    }
}

// ───────────────────────── gateway clients ─────────────────────────

/// HTTP client tuned for gateway traffic: generous timeout, status codes
/// surfaced as responses rather than errors.
pub fn client_agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(std::time::Duration::from_secs(30)))
        .http_status_as_error(false)
        .build()
        .into()
}

/// One chat round trip against a running gateway.
pub fn post_chat(
    agent: &ureq::Agent,
    base_url: &str,
    api_key: &str,
    session_id: Option<&str>,
    turn_kind: Option<&str>,
    messages: &[Message],
) -> Result<ChatResponse, WorldError> {
    let body = serde_json::to_string(&ChatRequest {
        messages: messages.to_vec(),
        session_id: session_id.map(str::to_string),
        turn_kind_hint: turn_kind.map(str::to_string),
        generation: None,
    })
    .expect("request serializes");
    let mut response = agent
        .post(format!("{base_url}/v1/chat"))
        .header("Authorization", &format!("Bearer {api_key}"))
        .header("Content-Type", "application/json")
        .send(body.as_bytes())
        .map_err(|e| WorldError::Gateway(e.to_string()))?;
    let status = response.status().as_u16();
    let text = response
        .body_mut()
        .read_to_string()
        .map_err(|e| WorldError::Gateway(e.to_string()))?;
    if status != 200 {
        return Err(WorldError::Gateway(format!("status {status}: {text}")));
    }
    serde_json::from_str(&text).map_err(|e| WorldError::Gateway(format!("bad response: {e}")))
}

/// What one persona instance saw: per-turn ground truth for the harness and
/// scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonaTrace {
    pub session_id: String,
    pub satisfied: Vec<bool>,
    pub scores: Vec<f64>,
    pub response_texts: Vec<String>,
    pub reply_texts: Vec<String>,
}

/// One persona conversation that can be advanced a single exchange at a
/// time, so a driver may interleave many clients and train between turns.
pub struct PersonaClient {
    pub persona: Persona,
    pub session_id: String,
    pub trace: PersonaTrace,
    messages: Vec<Message>,
    rng: ChaCha8Rng,
}

impl PersonaClient {
    pub fn new(persona: Persona, session_id: impl Into<String>, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let session_id = session_id.into();
        PersonaClient {
            persona,
            trace: PersonaTrace {
                session_id: session_id.clone(),
                satisfied: Vec::new(),
                scores: Vec::new(),
                response_texts: Vec::new(),
                reply_texts: Vec::new(),
            },
            session_id,
            messages: vec![
                Message::system("homework helper chat keep it natural"),
                Message::user(problem_prompt(0)),
            ],
            rng,
        }
    }

    /// One exchange: send the conversation so far, score the reply, and
    /// append the persona's reaction (which the next request will deliver
    /// as the previous turn's next-state signal).
    pub fn step(
        &mut self,
        agent: &ureq::Agent,
        base_url: &str,
        api_key: &str,
    ) -> Result<f64, WorldError> {
        let response = post_chat(
            agent,
            base_url,
            api_key,
            Some(&self.session_id),
            None,
            &self.messages,
        )?;
        let score = personalization_score(&self.persona, "", &response.tokens);
        self.trace.satisfied.push(self.persona.satisfied(&response.tokens));
        self.trace.scores.push(score);
        self.trace.response_texts.push(response.response_text.clone());

        self.messages.push(Message::assistant(&response.response_text));
        let reply = persona_step(&self.persona, &self.messages, &response.tokens, &mut self.rng);
        self.trace.reply_texts.push(reply.content.clone());
        self.messages.push(reply);
        Ok(score)
    }

    /// Delivers the pending reaction without asking for a fresh turn to
    /// react to, so the final exchange also gets its next-state signal.
    pub fn deliver_last_reply(
        &self,
        agent: &ureq::Agent,
        base_url: &str,
        api_key: &str,
    ) -> Result<(), WorldError> {
        let _ = post_chat(
            agent,
            base_url,
            api_key,
            Some(&self.session_id),
            None,
            &self.messages,
        )?;
        Ok(())
    }
}

/// Runs one persona client for `turns` exchanges. When `link_final` is set
/// a trailing request delivers the last reply so the final turn also gets
/// its next-state signal.
#[allow(clippy::too_many_arguments)]
pub fn run_persona_instance(
    base_url: &str,
    api_key: &str,
    persona: &Persona,
    session_id: &str,
    turns: usize,
    seed: u64,
    stream: u64,
    link_final: bool,
) -> Result<PersonaTrace, WorldError> {
    let agent = client_agent();
    let mut client = PersonaClient::new(persona.clone(), session_id, seed, stream);
    for _ in 0..turns {
        client.step(&agent, base_url, api_key)?;
    }
    if link_final {
        client.deliver_last_reply(&agent, base_url, api_key)?;
    }
    Ok(client.trace)
}

/// Spawns `n` persona instances with independent random streams and isolated
/// sessions, runs them concurrently to completion, and returns their traces
/// in instance order.
#[allow(clippy::too_many_arguments)]
pub fn spawn_parallel(
    spec: &WorldSpec,
    n: usize,
    base_url: &str,
    api_key: &str,
    vocab: &Vocabulary,
    turns: usize,
    session_prefix: &str,
    link_final: bool,
) -> Result<Vec<PersonaTrace>, WorldError> {
    assert!(n >= 1);
    let persona = spec.build_persona(vocab);
    let mut handles = Vec::with_capacity(n);
    for instance in 0..n {
        let persona = persona.clone();
        let base_url = base_url.to_string();
        let api_key = api_key.to_string();
        let session_id = format!("{session_prefix}-{instance}");
        let seed = spec.seed;
        handles.push(std::thread::spawn(move || {
            run_persona_instance(
                &base_url,
                &api_key,
                &persona,
                &session_id,
                turns,
                seed,
                instance as u64,
                link_final,
            )
        }));
    }
    handles
        .into_iter()
        .map(|h| h.join().expect("persona instance panicked"))
        .collect()
}

/// What one toy-task episode produced, for grouping and audits.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub session_id: String,
    pub task_id: String,
    pub outcome: f64,
    pub step_correct: Vec<bool>,
}

/// Drives one full episode of `task` through the gateway: each response is
/// applied to the environment, each environment reply goes back as a tool
/// message, and a trailing request links the final step's evidence.
/// Pass `turn_kind = Some("side")` for evaluation episodes that must not
/// produce trainable turns or judge jobs.
#[allow(clippy::too_many_arguments)]
pub fn run_task_episode(
    agent: &ureq::Agent,
    base_url: &str,
    api_key: &str,
    session_id: &str,
    task: &ToyTask,
    vocab: &Vocabulary,
    turn_kind: Option<&str>,
) -> Result<EpisodeTrace, WorldError> {
    let mut messages = vec![Message::user(task.first_prompt())];
    let mut state = ToyEnvState::new();
    let mut step_correct = Vec::with_capacity(task.horizon);

    for _ in 0..task.horizon {
        let response = post_chat(agent, base_url, api_key, Some(session_id), turn_kind, &messages)?;
        let (reply, _done, record) = toy_env_step(task, &mut state, &response.tokens, vocab)?;
        step_correct.push(record.correct);
        messages.push(Message::assistant(&response.response_text));
        messages.push(Message::tool(reply));
    }
    // Deliver the final evidence so the last step becomes judgeable.
    let _ = post_chat(agent, base_url, api_key, Some(session_id), turn_kind, &messages)?;

    Ok(EpisodeTrace {
        session_id: session_id.to_string(),
        task_id: task.id.clone(),
        outcome: toy_env_outcome(task, &state),
        step_correct,
    })
}

/// Scores the current policy the way the simulation results are reported:
/// first response to each of `n_problems` fresh problems, averaged. Probes
/// are side turns on throwaway sessions, so evaluation never trains.
pub fn eval_personalization(
    base_url: &str,
    api_key: &str,
    persona: &Persona,
    n_problems: usize,
    session_prefix: &str,
) -> Result<f64, WorldError> {
    let agent = client_agent();
    let mut total = 0.0;
    for i in 0..n_problems {
        let prompt = problem_prompt(i);
        let session_id = format!("{session_prefix}-eval-{i}");
        let response = post_chat(
            &agent,
            base_url,
            api_key,
            Some(&session_id),
            Some("side"),
            &[Message::user(&prompt)],
        )?;
        total += personalization_score(persona, &prompt, &response.tokens);
    }
    Ok(total / n_problems as f64)
}
