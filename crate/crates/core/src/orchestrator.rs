//! Wiring for the four decoupled loops: serving, worlds, judging, training.
//!
//! The gateway serves chat turns, world clients react to them, judge workers
//! turn finished turns (action + next-state evidence) into advantage-tagged
//! `Sample`s, and the trainer turns queued samples into new snapshots. The
//! loops communicate only through two unbounded queues (judge jobs, samples)
//! and the atomic snapshot hub, so no loop ever waits on another.
//!
//! Two drivers are provided over the same pipeline code. `Deployment` with
//! `spawn_loops = true` runs judge workers and the trainer as free-running
//! threads, which is how the liveness and latency properties are exercised.
//! The lockstep experiment runners (`run_personal_experiment`,
//! `run_stepwise_experiment`) instead drive clients round-robin and process
//! the queues inline at deterministic points, so a fixed seed reproduces a
//! run bit for bit.
//!
//! Per-turn judging follows the configured mode. Binary judging emits one
//! sample per judged turn, including zero-advantage ones. Hint distillation
//! emits a sample only when a usable hint survives filtering and drops the
//! turn otherwise; drops are final there. Combined mode keeps binary's full
//! coverage and adds the distillation term whenever a hint exists. The
//! at-least-one guarantee therefore only ever synthesizes entries for the
//! modes with binary coverage, where every judged turn is meant to appear.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::advantage::{
    binary_advantage, broadcast_step_advantage, build_enhanced_context, combined_advantage,
    integrated_step_reward, opd_advantage, step_index_group_advantage, AdvantageError,
    StepRewardTable,
};
use crate::gateway::{graceful_weight_swap, ChatService, Gateway, GatewayConfig};
use crate::judge::{
    judge_turn, majority_vote, select_hint, JudgeBackend, JudgeError, JudgeJob, JudgeMode,
    MIN_HINT_LEN,
};
use crate::policy::{
    context_from_messages, read_snapshot, write_snapshot, PolicyError, PolicyParams, SnapshotHub,
    Vocabulary,
};
use crate::recorder::{RecordEvent, RecordKind, Recorder, RecorderConfig};
use crate::session::SessionStore;
use crate::sync::{derive_seed, Gate, ShutdownFlag};
use crate::trainer::{TrainError, Trainer, TrainerConfig};
use crate::types::{AdvantageMode, Message, Sample, Score, TurnRecord, Verdict};
use crate::worlds::{
    client_agent, eval_personalization, initial_personal_policy, initial_stepwise_policy,
    run_task_episode, EpisodeTrace, HindsightHintJudge, Persona, PersonaClient,
    PersonalPolicyKnobs, StepCheckJudge, StudentReactionJudge, ToyTask, WorldError,
};

/// Re-queue limit for a judge job whose backend keeps failing.
pub const MAX_JUDGE_ATTEMPTS: u32 = 8;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ───────────────────────── configuration ─────────────────────────

/// Which bundle of defaults a run belongs to; recorded in summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Personal,
    General,
}

impl Preset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::Personal => "personal",
            Preset::General => "general",
        }
    }
}

/// How judged turns become samples and when the trainer fires.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub mode: AdvantageMode,
    /// Judge votes per turn.
    pub m_votes: usize,
    /// The trainer fires once this many samples are queued.
    pub batch_trigger: usize,
    pub w_binary: f64,
    pub w_opd: f64,
    /// Samples whose generating version is further behind the current
    /// parameters than this are dropped at batch assembly.
    pub max_staleness: u64,
    pub preset: Preset,
    /// Stepwise only: rollouts drawn per task before one group update.
    pub rollouts_per_task: usize,
    /// Stepwise only: when false each step reward is the bare episode
    /// outcome and the process votes are ignored (ablation arm).
    pub use_process_reward: bool,
}

impl PipelineConfig {
    pub fn personal(mode: AdvantageMode) -> Self {
        PipelineConfig {
            mode,
            m_votes: 1,
            batch_trigger: 16,
            w_binary: 1.0,
            w_opd: 1.0,
            max_staleness: 2,
            preset: Preset::Personal,
            rollouts_per_task: 1,
            use_process_reward: true,
        }
    }

    pub fn general() -> Self {
        PipelineConfig {
            mode: AdvantageMode::Stepwise,
            m_votes: 3,
            batch_trigger: 32,
            w_binary: 1.0,
            w_opd: 1.0,
            max_staleness: 2,
            preset: Preset::General,
            rollouts_per_task: 8,
            use_process_reward: true,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.m_votes == 0 {
            return Err(OrchestratorError::Config("m_votes must be >= 1".into()));
        }
        if self.batch_trigger == 0 {
            return Err(OrchestratorError::Config("batch_trigger must be >= 1".into()));
        }
        if self.mode == AdvantageMode::Stepwise && self.rollouts_per_task < 2 {
            return Err(OrchestratorError::Config(
                "stepwise mode needs at least 2 rollouts per task to standardize".into(),
            ));
        }
        Ok(())
    }
}

// ───────────────────────── counters ─────────────────────────

/// Cheap shared tallies; the record files remain the source of truth.
#[derive(Debug, Default)]
pub struct PipelineCounters {
    pub submitted: AtomicU64,
    pub trained: AtomicU64,
    pub dropped_stale: AtomicU64,
    pub dropped_no_hint: AtomicU64,
    pub dropped_other: AtomicU64,
    pub guarantee_applied: AtomicU64,
    pub judged_turns: AtomicU64,
    pub updates: AtomicU64,
    submitted_binary: AtomicU64,
    submitted_opd: AtomicU64,
    submitted_combined: AtomicU64,
    submitted_stepwise: AtomicU64,
}

impl PipelineCounters {
    fn count_source(&self, source: AdvantageMode) {
        let slot = match source {
            AdvantageMode::Binary => &self.submitted_binary,
            AdvantageMode::Opd => &self.submitted_opd,
            AdvantageMode::Combined => &self.submitted_combined,
            AdvantageMode::Stepwise => &self.submitted_stepwise,
        };
        slot.fetch_add(1, Ordering::Relaxed);
    }

    pub fn by_source(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        out.insert("binary".into(), self.submitted_binary.load(Ordering::Relaxed));
        out.insert("opd".into(), self.submitted_opd.load(Ordering::Relaxed));
        out.insert(
            "combined".into(),
            self.submitted_combined.load(Ordering::Relaxed),
        );
        out.insert(
            "stepwise".into(),
            self.submitted_stepwise.load(Ordering::Relaxed),
        );
        out
    }
}

fn record_sample_submitted(
    recorder: &Recorder,
    counters: &PipelineCounters,
    sample: &Sample,
    request: &[Message],
    guarantee: bool,
    extra: Value,
) {
    let mut payload = json!({
        "source": sample.source.as_str(),
        "policy_version": sample.policy_version,
        "advantage": sample.advantage,
        "old_log_probs": sample.old_log_probs,
        "response_tokens": sample.response_tokens,
        "request": request,
        "guarantee": guarantee,
    });
    if let (Some(obj), Value::Object(extra_fields)) = (payload.as_object_mut(), extra) {
        for (k, v) in extra_fields {
            obj.insert(k, v);
        }
    }
    recorder.record(RecordEvent::new(
        RecordKind::SampleSubmitted,
        Some(sample.session_id.clone()),
        Some(sample.turn_index),
        payload,
    ));
    counters.submitted.fetch_add(1, Ordering::Relaxed);
    counters.count_source(sample.source);
    if guarantee {
        counters.guarantee_applied.fetch_add(1, Ordering::Relaxed);
    }
}

fn record_sample_dropped(
    recorder: &Recorder,
    counters: &PipelineCounters,
    session_id: &str,
    turn_index: usize,
    policy_version: u64,
    source: AdvantageMode,
    reason: &str,
) {
    recorder.record(RecordEvent::new(
        RecordKind::SampleDropped,
        Some(session_id.to_string()),
        Some(turn_index),
        json!({
            "reason": reason,
            "source": source.as_str(),
            "policy_version": policy_version,
        }),
    ));
    let slot = match reason {
        "stale" => &counters.dropped_stale,
        "no_valid_hint" => &counters.dropped_no_hint,
        _ => &counters.dropped_other,
    };
    slot.fetch_add(1, Ordering::Relaxed);
}

// ───────────────────────── at-least-one guarantee ─────────────────────────

/// The most recent judged turn of a session within the current training
/// window, kept so batch assembly can re-include sessions whose turns all
/// produced zero gradient or were queued past the window.
#[derive(Debug, Clone)]
pub struct GuaranteeEntry {
    pub turn: TurnRecord,
    /// Advantage computed when the turn was judged; zeros when it carried
    /// no gradient.
    pub advantage: Vec<f64>,
    pub source: AdvantageMode,
}

/// Session → most recent judged turn, reset at every batch assembly. Only
/// the modes with full binary coverage feed this; hint-distillation drops
/// are final and never resurface through the guarantee.
#[derive(Default)]
pub struct GuaranteeRegistry {
    inner: Mutex<HashMap<String, GuaranteeEntry>>,
}

impl GuaranteeRegistry {
    pub fn observe(
        &self,
        session_id: &str,
        turn: &TurnRecord,
        advantage: &[f64],
        source: AdvantageMode,
    ) {
        let mut inner = self.inner.lock();
        let newer = inner
            .get(session_id)
            .map_or(true, |entry| turn.index >= entry.turn.index);
        if newer {
            inner.insert(
                session_id.to_string(),
                GuaranteeEntry {
                    turn: turn.clone(),
                    advantage: advantage.to_vec(),
                    source,
                },
            );
        }
    }

    /// Drains the window in session-id order (deterministic batches).
    pub fn take_window(&self) -> Vec<(String, GuaranteeEntry)> {
        let mut drained: Vec<_> = self.inner.lock().drain().collect();
        drained.sort_by(|a, b| a.0.cmp(&b.0));
        drained
    }

    pub fn len(&self) -> usize {
        self.inner.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ensures every session that contributed judged turns to the window
/// appears in the batch at least once: sessions with no sample in `batch`
/// get their most recent judged turn appended with its raw (possibly zero)
/// advantage. Returns how many samples were appended; they sit at the tail.
pub fn at_least_one_guarantee(
    vocab: &Vocabulary,
    window: &[(String, GuaranteeEntry)],
    batch: &mut Vec<Sample>,
) -> usize {
    let mut appended = 0;
    for (session_id, entry) in window {
        if batch.iter().any(|s| &s.session_id == session_id) {
            continue;
        }
        batch.push(Sample {
            session_id: session_id.clone(),
            turn_index: entry.turn.index,
            prompt_tokens: context_from_messages(vocab, &entry.turn.request),
            response_tokens: entry.turn.response_tokens.clone(),
            old_log_probs: entry.turn.old_log_probs.clone(),
            advantage: entry.advantage.clone(),
            policy_version: entry.turn.policy_version,
            source: entry.source,
        });
        appended += 1;
    }
    appended
}

// ───────────────────────── judge engine ─────────────────────────

/// One judged step of a toy-task rollout, held until its episode completes.
#[derive(Debug, Clone)]
pub struct JudgedStep {
    pub turn: TurnRecord,
    pub votes: Vec<Score>,
}

/// Stepwise mode parks judged steps here until the episode's outcome is
/// known; group assembly drains whole sessions.
#[derive(Default)]
pub struct StepCollector {
    inner: Mutex<HashMap<String, BTreeMap<usize, JudgedStep>>>,
}

impl StepCollector {
    pub fn insert(&self, session_id: &str, turn_index: usize, step: JudgedStep) {
        self.inner
            .lock()
            .entry(session_id.to_string())
            .or_default()
            .insert(turn_index, step);
    }

    pub fn take_session(&self, session_id: &str) -> Option<BTreeMap<usize, JudgedStep>> {
        self.inner.lock().remove(session_id)
    }

    pub fn pending_sessions(&self) -> usize {
        self.inner.lock().len()
    }
}

/// Turns judge jobs into samples (or recorded drops) according to the
/// configured mode. Shared verbatim by the free-running workers and the
/// lockstep driver.
pub struct JudgeEngine {
    config: PipelineConfig,
    vocab: Vocabulary,
    hub: Arc<SnapshotHub>,
    recorder: Arc<Recorder>,
    backend_binary: JudgeBackend,
    backend_hint: JudgeBackend,
    sample_tx: Sender<Sample>,
    counters: Arc<PipelineCounters>,
    guarantee: Arc<GuaranteeRegistry>,
    steps: Arc<StepCollector>,
}

impl JudgeEngine {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: PipelineConfig,
        vocab: Vocabulary,
        hub: Arc<SnapshotHub>,
        recorder: Arc<Recorder>,
        backend_binary: JudgeBackend,
        backend_hint: JudgeBackend,
        sample_tx: Sender<Sample>,
        counters: Arc<PipelineCounters>,
        guarantee: Arc<GuaranteeRegistry>,
        steps: Arc<StepCollector>,
    ) -> Self {
        JudgeEngine {
            config,
            vocab,
            hub,
            recorder,
            backend_binary,
            backend_hint,
            sample_tx,
            counters,
            guarantee,
            steps,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Processes one job to completion. `Err` hands the job back for
    /// re-queueing (backend unavailable), with its attempt count bumped.
    pub fn process(&self, job: JudgeJob) -> Result<(), JudgeJob> {
        let result = match self.config.mode {
            AdvantageMode::Binary => self.judge_binary(&job),
            AdvantageMode::Opd => self.judge_opd(&job),
            AdvantageMode::Combined => self.judge_combined(&job),
            AdvantageMode::Stepwise => self.judge_stepwise(&job),
        };
        match result {
            Ok(()) => {
                self.counters.judged_turns.fetch_add(1, Ordering::Relaxed);
                Ok(())
            }
            Err(JudgeError::BackendUnavailable(_)) => {
                let mut job = job;
                job.attempts += 1;
                Err(job)
            }
            Err(JudgeError::MalformedVerdict(_)) => {
                // judge_turn drops malformed votes, so this arm only fires
                // if a backend violates its mode contract outright.
                self.drop_job(&job, "malformed_verdict");
                Ok(())
            }
        }
    }

    /// Records the terminal drop of a job that exhausted its re-queues.
    pub fn drop_job(&self, job: &JudgeJob, reason: &str) {
        record_sample_dropped(
            &self.recorder,
            &self.counters,
            &job.session_id,
            job.turn.index,
            job.turn.policy_version,
            self.config.mode,
            reason,
        );
    }

    fn judge_binary(&self, job: &JudgeJob) -> Result<(), JudgeError> {
        let verdicts = judge_turn(job, self.config.m_votes, &self.backend_binary, JudgeMode::Binary)?;
        self.record_votes(job, JudgeMode::Binary, &verdicts);
        let scores: Vec<Score> = verdicts.iter().map(|v| v.score).collect();
        let r = if scores.is_empty() { 0 } else { majority_vote(&scores) };
        let advantage = binary_advantage(r, job.turn.response_tokens.len());
        let sample = self.sample_from_job(job, advantage.values, AdvantageMode::Binary);
        self.guarantee
            .observe(&job.session_id, &job.turn, &sample.advantage, AdvantageMode::Binary);
        self.submit(sample, &job.turn.request, json!({ "r": r }));
        Ok(())
    }

    fn judge_opd(&self, job: &JudgeJob) -> Result<(), JudgeError> {
        let hint_job = self.hint_job(job);
        let verdicts = judge_turn(&hint_job, self.config.m_votes, &self.backend_hint, JudgeMode::Opd)?;
        self.record_votes(job, JudgeMode::Opd, &verdicts);
        let Some(hint) = select_hint(&verdicts, MIN_HINT_LEN) else {
            self.drop_sample(job, AdvantageMode::Opd, "no_valid_hint");
            return Ok(());
        };
        self.record_hint(job, &hint);
        let teacher = match self.teacher_log_probs(&job.turn, &hint) {
            Ok(t) => t,
            Err(reason) => {
                self.drop_sample(job, AdvantageMode::Opd, reason);
                return Ok(());
            }
        };
        let advantage = opd_advantage(&teacher, &job.turn.old_log_probs)
            .expect("teacher scored the stored response, lengths agree");
        let sample = self.sample_from_job(job, advantage.values, AdvantageMode::Opd);
        self.submit(sample, &job.turn.request, json!({ "hint_used": true }));
        Ok(())
    }

    fn judge_combined(&self, job: &JudgeJob) -> Result<(), JudgeError> {
        let verdicts = judge_turn(job, self.config.m_votes, &self.backend_binary, JudgeMode::Binary)?;
        self.record_votes(job, JudgeMode::Binary, &verdicts);
        let scores: Vec<Score> = verdicts.iter().map(|v| v.score).collect();
        let r = if scores.is_empty() { 0 } else { majority_vote(&scores) };

        let hint_job = self.hint_job(job);
        let hints = judge_turn(&hint_job, self.config.m_votes, &self.backend_hint, JudgeMode::Opd)?;
        self.record_votes(job, JudgeMode::Opd, &hints);

        let response_len = job.turn.response_tokens.len();
        let (values, hint_used) = match select_hint(&hints, MIN_HINT_LEN) {
            Some(hint) => {
                self.record_hint(job, &hint);
                match self.teacher_log_probs(&job.turn, &hint) {
                    Ok(teacher) => {
                        let adv = combined_advantage(
                            r,
                            &teacher,
                            &job.turn.old_log_probs,
                            self.config.w_binary,
                            self.config.w_opd,
                        )
                        .expect("teacher scored the stored response, lengths agree");
                        (adv.values, true)
                    }
                    // The hint path failed structurally; keep the turn with
                    // its binary advantage so coverage is preserved.
                    Err(_) => (binary_advantage(r, response_len).values, false),
                }
            }
            None => (binary_advantage(r, response_len).values, false),
        };
        let sample = self.sample_from_job(job, values, AdvantageMode::Combined);
        self.guarantee
            .observe(&job.session_id, &job.turn, &sample.advantage, AdvantageMode::Combined);
        self.submit(
            sample,
            &job.turn.request,
            json!({
                "r": r,
                "hint_used": hint_used,
                "w_binary": self.config.w_binary,
                "w_opd": self.config.w_opd,
            }),
        );
        Ok(())
    }

    fn judge_stepwise(&self, job: &JudgeJob) -> Result<(), JudgeError> {
        let verdicts = judge_turn(job, self.config.m_votes, &self.backend_binary, JudgeMode::Binary)?;
        self.record_votes(job, JudgeMode::Binary, &verdicts);
        let votes: Vec<Score> = verdicts.iter().map(|v| v.score).collect();
        self.steps.insert(
            &job.session_id,
            job.turn.index,
            JudgedStep {
                turn: job.turn.clone(),
                votes,
            },
        );
        Ok(())
    }

    /// Scores the stored response under the turn's own generating snapshot,
    /// with the hint spliced into the context.
    fn teacher_log_probs(&self, turn: &TurnRecord, hint: &str) -> Result<Vec<f64>, &'static str> {
        let enhanced = build_enhanced_context(&turn.request, hint).map_err(|_| "no_user_message")?;
        let teacher = self
            .hub
            .get_version(turn.policy_version)
            .ok_or("snapshot_evicted")?;
        let context = context_from_messages(&self.vocab, &enhanced);
        teacher
            .log_probs_forced(&context, &turn.response_tokens)
            .map_err(|_| "teacher_scoring_failed")
    }

    /// Hint votes draw from an independent seed lineage so adding a second
    /// judge mode never perturbs the first one's randomness.
    fn hint_job(&self, job: &JudgeJob) -> JudgeJob {
        let mut hint_job = job.clone();
        hint_job.seed = derive_seed(job.seed, &["hint"]);
        hint_job
    }

    fn sample_from_job(&self, job: &JudgeJob, advantage: Vec<f64>, source: AdvantageMode) -> Sample {
        Sample {
            session_id: job.session_id.clone(),
            turn_index: job.turn.index,
            prompt_tokens: context_from_messages(&self.vocab, &job.turn.request),
            response_tokens: job.turn.response_tokens.clone(),
            old_log_probs: job.turn.old_log_probs.clone(),
            advantage,
            policy_version: job.turn.policy_version,
            source,
        }
    }

    fn submit(&self, sample: Sample, request: &[Message], extra: Value) {
        record_sample_submitted(&self.recorder, &self.counters, &sample, request, false, extra);
        let _ = self.sample_tx.send(sample);
    }

    fn drop_sample(&self, job: &JudgeJob, source: AdvantageMode, reason: &str) {
        record_sample_dropped(
            &self.recorder,
            &self.counters,
            &job.session_id,
            job.turn.index,
            job.turn.policy_version,
            source,
            reason,
        );
    }

    fn record_votes(&self, job: &JudgeJob, mode: JudgeMode, verdicts: &[Verdict]) {
        let mode_str = match mode {
            JudgeMode::Binary => "binary",
            JudgeMode::Opd => "opd",
        };
        for (i, verdict) in verdicts.iter().enumerate() {
            self.recorder.record(RecordEvent::new(
                RecordKind::JudgeVote,
                Some(job.session_id.clone()),
                Some(job.turn.index),
                json!({
                    "mode": mode_str,
                    "vote": i,
                    "score": verdict.score,
                    "hint": verdict.hint,
                    "raw": verdict.raw_text,
                }),
            ));
        }
    }

    fn record_hint(&self, job: &JudgeJob, hint: &str) {
        self.recorder.record(RecordEvent::new(
            RecordKind::HintSelected,
            Some(job.session_id.clone()),
            Some(job.turn.index),
            json!({ "hint": hint, "hint_chars": hint.chars().count() }),
        ));
    }
}

// ───────────────────────── stepwise group assembly ─────────────────────────

/// Builds the per-step samples for one task group once all of its episodes
/// have finished and been judged: integrated (or outcome-only) rewards per
/// step, standardized across rollouts by step index, broadcast over each
/// step's response tokens, then submitted. Returns how many samples went in.
fn assemble_step_group(
    engine: &JudgeEngine,
    group_id: &str,
    episodes: &[EpisodeTrace],
) -> Result<usize, OrchestratorError> {
    let mut rows: Vec<Vec<JudgedStep>> = Vec::with_capacity(episodes.len());
    for episode in episodes {
        let steps = engine.steps.take_session(&episode.session_id).ok_or_else(|| {
            OrchestratorError::Config(format!(
                "episode {} has no judged steps; judge queue not drained?",
                episode.session_id
            ))
        })?;
        rows.push(steps.into_values().collect());
    }

    let rewards: Vec<Vec<f64>> = rows
        .iter()
        .zip(episodes)
        .map(|(row, episode)| {
            row.iter()
                .map(|step| {
                    let votes: Vec<Score> =
                        step.votes.iter().copied().filter(|v| *v == 1 || *v == -1).collect();
                    if engine.config.use_process_reward && !votes.is_empty() {
                        integrated_step_reward(episode.outcome, &votes)
                    } else {
                        episode.outcome
                    }
                })
                .collect()
        })
        .collect();

    let advantages = step_index_group_advantage(&StepRewardTable::new(rewards))?;

    let mut submitted = 0;
    for (g, (row, episode)) in rows.iter().zip(episodes).enumerate() {
        for (t, step) in row.iter().enumerate() {
            let advantage =
                broadcast_step_advantage(advantages[g][t], step.turn.response_tokens.len());
            let sample = engine.sample_from_job(
                &JudgeJob {
                    session_id: episode.session_id.clone(),
                    turn: step.turn.clone(),
                    seed: 0,
                    attempts: 0,
                },
                advantage,
                AdvantageMode::Stepwise,
            );
            engine.submit(
                sample,
                &step.turn.request,
                json!({
                    "step": {
                        "group_id": group_id,
                        "rollout": g,
                        "step_index": t,
                        "outcome": episode.outcome,
                        "votes": step.votes,
                        "use_process_reward": engine.config.use_process_reward,
                    }
                }),
            );
            submitted += 1;
        }
    }
    Ok(submitted)
}

// ───────────────────────── trainer engine ─────────────────────────

/// One batch assembly + update + swap, shared by the free-running trainer
/// thread and the lockstep driver.
pub struct TrainerEngine {
    trainer: Trainer,
    hub: Arc<SnapshotHub>,
    recorder: Arc<Recorder>,
    vocab: Vocabulary,
    guarantee: Arc<GuaranteeRegistry>,
    counters: Arc<PipelineCounters>,
    snapshot_dir: PathBuf,
    max_staleness: u64,
}

impl TrainerEngine {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: TrainerConfig,
        hub: Arc<SnapshotHub>,
        recorder: Arc<Recorder>,
        vocab: Vocabulary,
        guarantee: Arc<GuaranteeRegistry>,
        counters: Arc<PipelineCounters>,
        snapshot_dir: PathBuf,
        max_staleness: u64,
    ) -> Self {
        TrainerEngine {
            trainer: Trainer::new(config),
            hub,
            recorder,
            vocab,
            guarantee,
            counters,
            snapshot_dir,
            max_staleness,
        }
    }

    /// Assembles and trains one batch: apply the at-least-one guarantee,
    /// drop stale samples, update, persist the snapshot, record the report,
    /// and swap. Returns the new version, or None when every sample was
    /// dropped (no update happens then).
    pub fn fire(&mut self, mut batch: Vec<Sample>) -> Result<Option<u64>, OrchestratorError> {
        let window = self.guarantee.take_window();
        let before = batch.len();
        at_least_one_guarantee(&self.vocab, &window, &mut batch);
        let requests: HashMap<&str, &GuaranteeEntry> = window
            .iter()
            .map(|(sid, entry)| (sid.as_str(), entry))
            .collect();
        for sample in &batch[before..] {
            let entry = requests[sample.session_id.as_str()];
            record_sample_submitted(
                &self.recorder,
                &self.counters,
                sample,
                &entry.turn.request,
                true,
                Value::Null,
            );
        }

        let current = self.hub.current();
        let mut kept = Vec::with_capacity(batch.len());
        let mut stale = 0u64;
        for sample in batch {
            if current.version.saturating_sub(sample.policy_version) > self.max_staleness {
                record_sample_dropped(
                    &self.recorder,
                    &self.counters,
                    &sample.session_id,
                    sample.turn_index,
                    sample.policy_version,
                    sample.source,
                    "stale",
                );
                stale += 1;
            } else {
                kept.push(sample);
            }
        }
        if kept.is_empty() {
            return Ok(None);
        }

        let (next, report) = self.trainer.train_step(&current, &kept)?;
        write_snapshot(&next, &self.snapshot_dir.join(format!("v{}.snap", next.version)))?;

        let trained_keys: Vec<Value> = kept
            .iter()
            .map(|s| json!([s.session_id, s.turn_index, s.source.as_str(), s.policy_version]))
            .collect();
        let mut payload = serde_json::to_value(&report).expect("report serializes");
        payload["dropped_for_staleness"] = json!(stale);
        payload["trained"] = json!(trained_keys);
        self.recorder
            .record(RecordEvent::new(RecordKind::TrainReport, None, None, payload));

        let version = graceful_weight_swap(&self.hub, &self.recorder, next)?;
        self.counters.trained.fetch_add(kept.len() as u64, Ordering::Relaxed);
        self.counters.updates.fetch_add(1, Ordering::Relaxed);
        Ok(Some(version))
    }
}

// ───────────────────────── deployment ─────────────────────────

pub struct DeploymentConfig {
    pub pipeline: PipelineConfig,
    pub trainer: TrainerConfig,
    pub gateway: GatewayConfig,
    pub vocab: Vocabulary,
    pub initial_policy: PolicyParams,
    pub backend_binary: JudgeBackend,
    pub backend_hint: JudgeBackend,
    pub judge_workers: usize,
    pub out_dir: PathBuf,
}

impl DeploymentConfig {
    /// Personal-track defaults against the scripted student persona judges.
    pub fn scripted_personal(mode: AdvantageMode, run_seed: u64, out_dir: &Path) -> Self {
        let vocab = Vocabulary::default_64();
        let pipeline = PipelineConfig::personal(mode);
        let trainer = TrainerConfig {
            kl_coef: 0.0,
            batch_trigger: pipeline.batch_trigger,
            max_staleness: pipeline.max_staleness,
            ..TrainerConfig::default()
        };
        let initial_policy = initial_personal_policy(&vocab, 2, PersonalPolicyKnobs::default());
        DeploymentConfig {
            pipeline,
            trainer,
            gateway: GatewayConfig {
                run_seed,
                ..GatewayConfig::default()
            },
            vocab,
            initial_policy,
            backend_binary: JudgeBackend::scripted(Arc::new(StudentReactionJudge)),
            backend_hint: JudgeBackend::scripted(Arc::new(HindsightHintJudge)),
            judge_workers: 2,
            out_dir: out_dir.to_path_buf(),
        }
    }
}

/// A fully wired system: gateway + store + recorder + hub + queues, with
/// the judge/trainer loops either free-running (threads) or left to the
/// caller to pump inline (lockstep).
pub struct Deployment {
    pub gateway: Gateway,
    pub hub: Arc<SnapshotHub>,
    pub recorder: Arc<Recorder>,
    pub store: Arc<SessionStore>,
    pub counters: Arc<PipelineCounters>,
    /// Closing this stalls the judge workers (they stop consuming jobs).
    pub judge_gate: Gate,
    /// Closing this stalls the trainer loop.
    pub trainer_gate: Gate,
    engine: Arc<JudgeEngine>,
    trainer_engine: Arc<Mutex<TrainerEngine>>,
    judge_tx: Sender<JudgeJob>,
    judge_rx: Receiver<JudgeJob>,
    sample_rx: Receiver<Sample>,
    batch_trigger: usize,
    shutdown: ShutdownFlag,
    workers: Vec<JoinHandle<()>>,
}

impl Deployment {
    pub fn start(config: DeploymentConfig, spawn_loops: bool) -> Result<Deployment, OrchestratorError> {
        config.pipeline.validate()?;
        let snapshot_dir = config.out_dir.join("snapshots");
        fs::create_dir_all(&snapshot_dir)?;

        let recorder = Arc::new(
            Recorder::new(
                config.out_dir.join("records"),
                RecorderConfig {
                    start_version: config.initial_policy.version,
                    ..RecorderConfig::default()
                },
                Gate::new(),
            )
            .map_err(|e| OrchestratorError::Config(format!("recorder: {e}")))?,
        );
        write_snapshot(
            &config.initial_policy,
            &snapshot_dir.join(format!("v{}.snap", config.initial_policy.version)),
        )?;

        let retain = config.pipeline.max_staleness as usize + 4;
        let hub = Arc::new(SnapshotHub::new(config.initial_policy, retain));
        let store = Arc::new(SessionStore::new());
        let (judge_tx, judge_rx) = unbounded::<JudgeJob>();
        let (sample_tx, sample_rx) = unbounded::<Sample>();
        let counters = Arc::new(PipelineCounters::default());
        let guarantee = Arc::new(GuaranteeRegistry::default());
        let steps = Arc::new(StepCollector::default());

        let service = Arc::new(ChatService::new(
            config.gateway,
            config.vocab.clone(),
            hub.clone(),
            store.clone(),
            judge_tx.clone(),
            recorder.clone(),
        ));
        let gateway = Gateway::start(service)?;

        let engine = Arc::new(JudgeEngine::new(
            config.pipeline.clone(),
            config.vocab.clone(),
            hub.clone(),
            recorder.clone(),
            config.backend_binary,
            config.backend_hint,
            sample_tx,
            counters.clone(),
            guarantee.clone(),
            steps,
        ));
        let trainer_engine = Arc::new(Mutex::new(TrainerEngine::new(
            config.trainer,
            hub.clone(),
            recorder.clone(),
            config.vocab,
            guarantee,
            counters.clone(),
            snapshot_dir,
            config.pipeline.max_staleness,
        )));

        let judge_gate = Gate::new();
        let trainer_gate = Gate::new();
        let shutdown = ShutdownFlag::default();
        let mut workers = Vec::new();

        if spawn_loops {
            for i in 0..config.judge_workers.max(1) {
                let engine = engine.clone();
                let rx = judge_rx.clone();
                let tx = judge_tx.clone();
                let gate = judge_gate.clone();
                let flag = shutdown.clone();
                workers.push(
                    thread::Builder::new()
                        .name(format!("judge-{i}"))
                        .spawn(move || judge_worker(&engine, &rx, &tx, &gate, &flag))
                        .expect("spawn judge worker"),
                );
            }
            let te = trainer_engine.clone();
            let rx = sample_rx.clone();
            let gate = trainer_gate.clone();
            let flag = shutdown.clone();
            let trigger = config.pipeline.batch_trigger;
            workers.push(
                thread::Builder::new()
                    .name("trainer".into())
                    .spawn(move || trainer_loop(&te, &rx, trigger, &gate, &flag))
                    .expect("spawn trainer"),
            );
        }

        Ok(Deployment {
            gateway,
            hub,
            recorder,
            store,
            counters,
            judge_gate,
            trainer_gate,
            engine,
            trainer_engine,
            judge_tx,
            judge_rx,
            sample_rx,
            batch_trigger: config.pipeline.batch_trigger,
            shutdown,
            workers,
        })
    }

    pub fn url(&self) -> String {
        self.gateway.url()
    }

    pub fn engine(&self) -> &Arc<JudgeEngine> {
        &self.engine
    }

    pub fn pending_judge_jobs(&self) -> usize {
        self.judge_rx.len()
    }

    pub fn queued_samples(&self) -> usize {
        self.sample_rx.len()
    }

    /// Lockstep pump: processes every queued judge job inline. Jobs whose
    /// backend is unavailable are re-queued up to MAX_JUDGE_ATTEMPTS; the
    /// drain stops early rather than spin on a dead backend.
    pub fn drain_judge_queue(&self) -> usize {
        let mut processed = 0;
        let mut consecutive_requeues = 0;
        while let Ok(job) = self.judge_rx.try_recv() {
            self.judge_gate.pass();
            match self.engine.process(job) {
                Ok(()) => {
                    processed += 1;
                    consecutive_requeues = 0;
                }
                Err(job) => {
                    if job.attempts >= MAX_JUDGE_ATTEMPTS {
                        self.engine.drop_job(&job, "backend_unavailable");
                        continue;
                    }
                    consecutive_requeues += 1;
                    let _ = self.judge_tx.send(job);
                    if consecutive_requeues > 2 * MAX_JUDGE_ATTEMPTS {
                        break;
                    }
                }
            }
        }
        processed
    }

    /// Lockstep pump: fires the trainer while a full batch is queued.
    /// Returns the versions published, in order.
    pub fn try_train(&self) -> Result<Vec<u64>, OrchestratorError> {
        let mut versions = Vec::new();
        while self.sample_rx.len() >= self.batch_trigger {
            let batch: Vec<Sample> = (0..self.batch_trigger)
                .map(|_| self.sample_rx.try_recv().expect("queue length checked"))
                .collect();
            if let Some(version) = self.trainer_engine.lock().fire(batch)? {
                versions.push(version);
            }
        }
        Ok(versions)
    }

    /// Stepwise: assemble and submit one finished task group.
    pub fn assemble_step_group(
        &self,
        group_id: &str,
        episodes: &[EpisodeTrace],
    ) -> Result<usize, OrchestratorError> {
        assemble_step_group(&self.engine, group_id, episodes)
    }

    pub fn shutdown(&mut self) {
        self.shutdown.trigger();
        self.judge_gate.open();
        self.trainer_gate.open();
        for worker in self.workers.drain(..) {
            let _ = worker.join();
        }
        self.gateway.stop();
        self.recorder.flush();
    }
}

impl Drop for Deployment {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn judge_worker(
    engine: &JudgeEngine,
    judge_rx: &Receiver<JudgeJob>,
    judge_tx: &Sender<JudgeJob>,
    gate: &Gate,
    shutdown: &ShutdownFlag,
) {
    loop {
        match judge_rx.recv_timeout(Duration::from_millis(25)) {
            Ok(job) => {
                gate.pass();
                if shutdown.is_triggered() {
                    break;
                }
                match engine.process(job) {
                    Ok(()) => {}
                    Err(job) => {
                        if job.attempts >= MAX_JUDGE_ATTEMPTS {
                            engine.drop_job(&job, "backend_unavailable");
                        } else {
                            thread::sleep(Duration::from_millis(5 * u64::from(job.attempts)));
                            let _ = judge_tx.send(job);
                        }
                    }
                }
            }
            Err(RecvTimeoutError::Timeout) => {
                if shutdown.is_triggered() {
                    break;
                }
            }
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
}

fn trainer_loop(
    engine: &Mutex<TrainerEngine>,
    sample_rx: &Receiver<Sample>,
    batch_trigger: usize,
    gate: &Gate,
    shutdown: &ShutdownFlag,
) {
    loop {
        gate.pass();
        if shutdown.is_triggered() {
            break;
        }
        if sample_rx.len() >= batch_trigger {
            let batch: Vec<Sample> = (0..batch_trigger)
                .filter_map(|_| sample_rx.try_recv().ok())
                .collect();
            if let Err(e) = engine.lock().fire(batch) {
                eprintln!("trainer: update failed: {e}");
            }
        } else {
            thread::sleep(Duration::from_millis(2));
        }
    }
}

// ───────────────────────── lockstep experiments ─────────────────────────

pub const EXPERIMENT_API_KEY: &str = "world-key";

/// Personal-track experiment: persona clients round-robin against the
/// gateway, inline judging, training at the batch trigger.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub mode: AdvantageMode,
    pub seed: u64,
    /// Stop after this many updates (ignored when `turn_budget` is set).
    pub updates: u64,
    /// Stop after this many client exchanges instead, for equal-traffic
    /// comparisons across modes.
    pub turn_budget: Option<u64>,
    pub clients: usize,
    pub eval_updates: Vec<u64>,
    pub eval_problems: usize,
    pub knobs: PersonalPolicyKnobs,
    pub max_len: usize,
    pub lr: f64,
    pub kl_coef: f64,
    pub batch_trigger: usize,
    pub m_votes: usize,
    pub w_binary: f64,
    pub w_opd: f64,
}

impl ExperimentConfig {
    pub fn personal(mode: AdvantageMode, seed: u64) -> Self {
        ExperimentConfig {
            mode,
            seed,
            updates: 16,
            turn_budget: None,
            clients: 8,
            eval_updates: vec![0, 8, 16],
            eval_problems: 36,
            knobs: PersonalPolicyKnobs::default(),
            max_len: 12,
            // Toy-scale rate: the k-gram policy's per-token-mean loss needs
            // steps this large to move a 3-point bias gap in 16 updates.
            lr: 8.0,
            kl_coef: 0.0,
            batch_trigger: 16,
            m_votes: 1,
            w_binary: 1.0,
            w_opd: 1.0,
        }
    }
}

/// Multi-step toy-task experiment: one task group (G rollouts) per update.
#[derive(Debug, Clone)]
pub struct StepwiseConfig {
    pub seed: u64,
    pub updates: u64,
    pub rollouts_per_task: usize,
    pub horizon: usize,
    pub branching: usize,
    pub m_votes: usize,
    /// Probability a process vote flips sign (judge noise).
    pub flip_prob: f64,
    pub use_process_reward: bool,
    pub eval_updates: Vec<u64>,
    pub eval_episodes: usize,
    pub max_len: usize,
    pub lr: f64,
    pub kl_coef: f64,
}

impl StepwiseConfig {
    pub fn general(seed: u64, use_process_reward: bool) -> Self {
        StepwiseConfig {
            seed,
            updates: 50,
            rollouts_per_task: 8,
            horizon: 4,
            branching: 4,
            m_votes: 3,
            flip_prob: 0.2,
            use_process_reward,
            eval_updates: vec![0, 25, 50],
            eval_episodes: 24,
            max_len: 4,
            lr: 6.0,
            kl_coef: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    pub updates: u64,
    pub score: f64,
}

/// Everything a finished run reports; written as JSON next to the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: String,
    pub mode: String,
    /// What `trajectory` measures: personalization score or task success.
    pub metric: String,
    pub seed: u64,
    pub updates: u64,
    pub turns_served: u64,
    pub judged_turns: u64,
    pub final_version: u64,
    pub submitted: u64,
    pub trained: u64,
    pub dropped_for_staleness: u64,
    pub dropped_no_hint: u64,
    pub guarantee_applied: u64,
    pub samples_by_source: BTreeMap<String, u64>,
    pub trajectory: Vec<ScorePoint>,
}

impl RunSummary {
    pub fn score_at(&self, updates: u64) -> Option<f64> {
        self.trajectory
            .iter()
            .find(|p| p.updates == updates)
            .map(|p| p.score)
    }

    pub fn baseline_score(&self) -> Option<f64> {
        self.score_at(0)
    }

    pub fn final_score(&self) -> Option<f64> {
        self.trajectory.last().map(|p| p.score)
    }
}

pub fn write_run_summary(path: &Path, summary: &RunSummary) -> Result<(), OrchestratorError> {
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    fs::write(path, text)?;
    Ok(())
}

fn summary_from_counters(
    preset: Preset,
    mode: AdvantageMode,
    metric: &str,
    seed: u64,
    turns_served: u64,
    deployment: &Deployment,
    trajectory: Vec<ScorePoint>,
) -> RunSummary {
    let c = &deployment.counters;
    RunSummary {
        preset: preset.as_str().to_string(),
        mode: mode.as_str().to_string(),
        metric: metric.to_string(),
        seed,
        updates: c.updates.load(Ordering::Relaxed),
        turns_served,
        judged_turns: c.judged_turns.load(Ordering::Relaxed),
        final_version: deployment.hub.version(),
        submitted: c.submitted.load(Ordering::Relaxed),
        trained: c.trained.load(Ordering::Relaxed),
        dropped_for_staleness: c.dropped_stale.load(Ordering::Relaxed),
        dropped_no_hint: c.dropped_no_hint.load(Ordering::Relaxed),
        guarantee_applied: c.guarantee_applied.load(Ordering::Relaxed),
        samples_by_source: c.by_source(),
        trajectory,
    }
}

/// Runs the personal track in lockstep: `clients` persona conversations
/// advanced round-robin, judge queue drained after every exchange, trainer
/// fired exactly when the batch trigger is reached, evaluation probes (side
/// turns on throwaway sessions) at the configured update counts.
pub fn run_personal_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<RunSummary, OrchestratorError> {
    let vocab = Vocabulary::default_64();
    let pipeline = PipelineConfig {
        mode: config.mode,
        m_votes: config.m_votes,
        batch_trigger: config.batch_trigger,
        w_binary: config.w_binary,
        w_opd: config.w_opd,
        ..PipelineConfig::personal(config.mode)
    };
    let deployment_config = DeploymentConfig {
        pipeline,
        trainer: TrainerConfig {
            lr: config.lr,
            kl_coef: config.kl_coef,
            batch_trigger: config.batch_trigger,
            max_staleness: 2,
            ..TrainerConfig::default()
        },
        gateway: GatewayConfig {
            run_seed: config.seed,
            default_max_len: config.max_len,
            ..GatewayConfig::default()
        },
        vocab: vocab.clone(),
        initial_policy: initial_personal_policy(&vocab, 2, config.knobs),
        backend_binary: JudgeBackend::scripted(Arc::new(StudentReactionJudge)),
        backend_hint: JudgeBackend::scripted(Arc::new(HindsightHintJudge)),
        judge_workers: 0,
        out_dir: out_dir.to_path_buf(),
    };
    let mut deployment = Deployment::start(deployment_config, false)?;
    let url = deployment.url();
    let agent = client_agent();
    let persona = Persona::student(&vocab);

    let mut clients: Vec<PersonaClient> = (0..config.clients)
        .map(|i| {
            PersonaClient::new(
                persona.clone(),
                format!("sim-{}-{i}", config.seed),
                derive_seed(config.seed, &["world"]),
                i as u64,
            )
        })
        .collect();

    let mut trajectory = Vec::new();
    let evaluate = |updates_done: u64| -> Result<Option<ScorePoint>, OrchestratorError> {
        if !config.eval_updates.contains(&updates_done) {
            return Ok(None);
        }
        let score = eval_personalization(
            &url,
            EXPERIMENT_API_KEY,
            &persona,
            config.eval_problems,
            &format!("ev{updates_done}"),
        )?;
        Ok(Some(ScorePoint {
            updates: updates_done,
            score,
        }))
    };
    if let Some(point) = evaluate(0)? {
        trajectory.push(point);
    }

    let mut turns_served = 0u64;
    let mut updates_done = 0u64;
    'outer: loop {
        for client in &mut clients {
            client.step(&agent, &url, EXPERIMENT_API_KEY)?;
            turns_served += 1;
            deployment.drain_judge_queue();
            for _version in deployment.try_train()? {
                updates_done += 1;
                if let Some(point) = evaluate(updates_done)? {
                    trajectory.push(point);
                }
                if config.turn_budget.is_none() && updates_done >= config.updates {
                    break 'outer;
                }
            }
            if let Some(budget) = config.turn_budget {
                if turns_served >= budget {
                    break 'outer;
                }
            }
        }
    }

    let summary = summary_from_counters(
        Preset::Personal,
        config.mode,
        "personalization_score",
        config.seed,
        turns_served,
        &deployment,
        trajectory,
    );
    write_run_summary(&out_dir.join("summary.json"), &summary)?;
    deployment.shutdown();
    Ok(summary)
}

/// Runs the multi-step toy task in lockstep: per update, one fresh task,
/// `rollouts_per_task` episodes, inline judging, group assembly, one train
/// step. Evaluation episodes ride side turns so they never train.
pub fn run_stepwise_experiment(
    config: &StepwiseConfig,
    out_dir: &Path,
) -> Result<RunSummary, OrchestratorError> {
    let vocab = Vocabulary::default_64();
    let trigger = config.rollouts_per_task * config.horizon;
    let pipeline = PipelineConfig {
        m_votes: config.m_votes,
        batch_trigger: trigger,
        rollouts_per_task: config.rollouts_per_task,
        use_process_reward: config.use_process_reward,
        ..PipelineConfig::general()
    };
    let backend = JudgeBackend::scripted(Arc::new(StepCheckJudge {
        flip_prob: config.flip_prob,
    }));
    let deployment_config = DeploymentConfig {
        pipeline,
        trainer: TrainerConfig {
            lr: config.lr,
            kl_coef: config.kl_coef,
            batch_trigger: trigger,
            max_staleness: 2,
            ..TrainerConfig::default()
        },
        gateway: GatewayConfig {
            run_seed: config.seed,
            default_max_len: config.max_len,
            ..GatewayConfig::default()
        },
        vocab: vocab.clone(),
        initial_policy: initial_stepwise_policy(&vocab, 2, config.branching),
        backend_binary: backend.clone(),
        backend_hint: backend,
        judge_workers: 0,
        out_dir: out_dir.to_path_buf(),
    };
    let mut deployment = Deployment::start(deployment_config, false)?;
    let url = deployment.url();
    let agent = client_agent();

    let mut turns_served = 0u64;
    let mut trajectory = Vec::new();
    let evaluate = |updates_done: u64, turns: &mut u64| -> Result<Option<ScorePoint>, OrchestratorError> {
        if !config.eval_updates.contains(&updates_done) {
            return Ok(None);
        }
        let mut successes = 0usize;
        for e in 0..config.eval_episodes {
            let task = ToyTask::generate(
                format!("ev-{updates_done}-{e}"),
                config.horizon,
                config.branching,
                derive_seed(config.seed, &["eval", &updates_done.to_string(), &e.to_string()]),
            );
            let trace = run_task_episode(
                &agent,
                &url,
                EXPERIMENT_API_KEY,
                &format!("ev{updates_done}-e{e}"),
                &task,
                &vocab,
                Some("side"),
            )?;
            *turns += config.horizon as u64 + 1;
            if trace.outcome == 1.0 {
                successes += 1;
            }
        }
        Ok(Some(ScorePoint {
            updates: updates_done,
            score: successes as f64 / config.eval_episodes as f64,
        }))
    };
    if let Some(point) = evaluate(0, &mut turns_served)? {
        trajectory.push(point);
    }

    for update in 0..config.updates {
        let task = ToyTask::generate(
            format!("task-{update}"),
            config.horizon,
            config.branching,
            derive_seed(config.seed, &["task", &update.to_string()]),
        );
        let mut episodes = Vec::with_capacity(config.rollouts_per_task);
        for rollout in 0..config.rollouts_per_task {
            episodes.push(run_task_episode(
                &agent,
                &url,
                EXPERIMENT_API_KEY,
                &format!("t{update}-g{rollout}"),
                &task,
                &vocab,
                None,
            )?);
            turns_served += config.horizon as u64 + 1;
        }
        deployment.drain_judge_queue();
        deployment.assemble_step_group(&format!("grp-{update}"), &episodes)?;
        let versions = deployment.try_train()?;
        debug_assert_eq!(versions.len(), 1, "one group feeds exactly one update");
        if let Some(point) = evaluate(update + 1, &mut turns_served)? {
            trajectory.push(point);
        }
    }

    let summary = summary_from_counters(
        Preset::General,
        AdvantageMode::Stepwise,
        "task_success",
        config.seed,
        turns_served,
        &deployment,
        trajectory,
    );
    write_run_summary(&out_dir.join("summary.json"), &summary)?;
    deployment.shutdown();
    Ok(summary)
}

/// One entry point over both tracks, used by the CLI.
pub enum ExperimentSpec {
    Personal(ExperimentConfig),
    Stepwise(StepwiseConfig),
}

pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<RunSummary, OrchestratorError> {
    match spec {
        ExperimentSpec::Personal(config) => run_personal_experiment(config, out_dir),
        ExperimentSpec::Stepwise(config) => run_stepwise_experiment(config, out_dir),
    }
}

// ───────────────────────── record audits ─────────────────────────

/// Totals from walking the records: every submitted sample must be trained,
/// dropped stale, or still pending in the queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConservationAudit {
    pub submitted: u64,
    pub trained: u64,
    pub dropped_for_staleness: u64,
    /// Submitted but neither trained nor dropped at read time.
    pub pending: u64,
}

fn sample_key(session_id: &str, turn_index: u64, source: &str, version: u64) -> String {
    format!("{session_id}#{turn_index}#{source}#{version}")
}

/// Walks the record stream and balances sample submissions against train
/// reports and staleness drops, as multisets keyed by
/// (session, turn, source, version). Errors on consumption without a
/// matching submission or on malformed events.
pub fn audit_sample_conservation(records: &[RecordEvent]) -> Result<ConservationAudit, String> {
    let mut balance: HashMap<String, i64> = HashMap::new();
    let mut audit = ConservationAudit {
        submitted: 0,
        trained: 0,
        dropped_for_staleness: 0,
        pending: 0,
    };
    for event in records {
        match event.kind {
            RecordKind::SampleSubmitted => {
                let sid = event
                    .session_id
                    .as_deref()
                    .ok_or("sample_submitted without session id")?;
                let idx = event.turn_index.ok_or("sample_submitted without turn index")? as u64;
                let source = event.payload["source"]
                    .as_str()
                    .ok_or("sample_submitted without source")?;
                let version = event.payload["policy_version"]
                    .as_u64()
                    .ok_or("sample_submitted without policy_version")?;
                *balance.entry(sample_key(sid, idx, source, version)).or_default() += 1;
                audit.submitted += 1;
            }
            RecordKind::TrainReport => {
                let trained = event.payload["trained"]
                    .as_array()
                    .ok_or("train_report without trained list")?;
                for entry in trained {
                    let parts = entry.as_array().ok_or("malformed trained entry")?;
                    let sid = parts[0].as_str().ok_or("malformed trained entry")?;
                    let idx = parts[1].as_u64().ok_or("malformed trained entry")?;
                    let source = parts[2].as_str().ok_or("malformed trained entry")?;
                    let version = parts[3].as_u64().ok_or("malformed trained entry")?;
                    *balance.entry(sample_key(sid, idx, source, version)).or_default() -= 1;
                    audit.trained += 1;
                }
            }
            RecordKind::SampleDropped => {
                if event.payload["reason"].as_str() == Some("stale") {
                    let sid = event
                        .session_id
                        .as_deref()
                        .ok_or("sample_dropped without session id")?;
                    let idx = event.turn_index.ok_or("sample_dropped without turn index")? as u64;
                    let source = event.payload["source"]
                        .as_str()
                        .ok_or("sample_dropped without source")?;
                    let version = event.payload["policy_version"]
                        .as_u64()
                        .ok_or("sample_dropped without policy_version")?;
                    *balance.entry(sample_key(sid, idx, source, version)).or_default() -= 1;
                    audit.dropped_for_staleness += 1;
                }
            }
            _ => {}
        }
    }
    let mut over_consumed: Vec<&String> = balance
        .iter()
        .filter(|(_, &v)| v < 0)
        .map(|(k, _)| k)
        .collect();
    if !over_consumed.is_empty() {
        over_consumed.sort();
        over_consumed.truncate(5);
        return Err(format!(
            "samples consumed without a matching submission: {over_consumed:?}"
        ));
    }
    audit.pending = balance.values().filter(|&&v| v > 0).map(|&v| v as u64).sum();
    Ok(audit)
}

/// Checks that weight-swap versions step by exactly 1 and that the record
/// file had already rotated when each swap event was written (the event's
/// record_version equals the new version). Returns the final version.
pub fn audit_version_monotonic(records: &[RecordEvent]) -> Result<u64, String> {
    let mut last = 0u64;
    for event in records {
        if event.kind != RecordKind::WeightSwap {
            continue;
        }
        let version = event.payload["new_version"]
            .as_u64()
            .ok_or("weight_swap without new_version")?;
        if version != last + 1 {
            return Err(format!("swap to {version} after {last}, expected {}", last + 1));
        }
        if event.record_version != version {
            return Err(format!(
                "swap to {version} recorded in file version {}; rotation missed",
                event.record_version
            ));
        }
        last = version;
    }
    Ok(last)
}

// ───────────────────────── record replay ─────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMismatch {
    pub session_id: String,
    pub turn_index: usize,
    pub source: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    pub checked: u64,
    pub skipped: u64,
    pub mismatches: Vec<ReplayMismatch>,
}

const REPLAY_TOLERANCE: f64 = 1e-9;

struct StepwiseRow {
    session_id: String,
    turn_index: usize,
    rollout: usize,
    step_index: usize,
    outcome: f64,
    votes: Vec<Score>,
    use_process_reward: bool,
    advantage: Vec<f64>,
}

/// Recomputes every recorded sample's advantage from the recorded votes,
/// hints, and archived snapshots, and reports disagreements. An untampered
/// record replays with zero mismatches; guarantee-synthesized samples are
/// skipped (they copy a previously computed advantage).
pub fn replay_advantages(
    records: &[RecordEvent],
    snapshot_dir: &Path,
    vocab: &Vocabulary,
) -> Result<ReplayReport, String> {
    let mut votes: HashMap<(String, usize, String), Vec<Score>> = HashMap::new();
    let mut hints: HashMap<(String, usize), String> = HashMap::new();
    for event in records {
        match event.kind {
            RecordKind::JudgeVote => {
                let sid = event.session_id.clone().ok_or("judge_vote without session id")?;
                let idx = event.turn_index.ok_or("judge_vote without turn index")?;
                let mode = event.payload["mode"]
                    .as_str()
                    .ok_or("judge_vote without mode")?
                    .to_string();
                let score = event.payload["score"]
                    .as_i64()
                    .ok_or("judge_vote without score")? as Score;
                votes.entry((sid, idx, mode)).or_default().push(score);
            }
            RecordKind::HintSelected => {
                let sid = event.session_id.clone().ok_or("hint_selected without session id")?;
                let idx = event.turn_index.ok_or("hint_selected without turn index")?;
                let hint = event.payload["hint"]
                    .as_str()
                    .ok_or("hint_selected without hint")?
                    .to_string();
                hints.insert((sid, idx), hint);
            }
            _ => {}
        }
    }

    let mut report = ReplayReport::default();
    let mut snapshots: HashMap<u64, Arc<PolicyParams>> = HashMap::new();
    let mut groups: HashMap<String, Vec<StepwiseRow>> = HashMap::new();

    for event in records {
        if event.kind != RecordKind::SampleSubmitted {
            continue;
        }
        let sid = event
            .session_id
            .clone()
            .ok_or("sample_submitted without session id")?;
        let idx = event.turn_index.ok_or("sample_submitted without turn index")?;
        let source = event.payload["source"]
            .as_str()
            .ok_or("sample_submitted without source")?
            .to_string();
        if event.payload["guarantee"].as_bool() == Some(true) {
            report.skipped += 1;
            continue;
        }
        let advantage: Vec<f64> = parse_f64_array(&event.payload["advantage"])
            .ok_or("sample_submitted without advantage")?;

        let mismatch = |detail: String, report: &mut ReplayReport| {
            report.mismatches.push(ReplayMismatch {
                session_id: sid.clone(),
                turn_index: idx,
                source: source.clone(),
                detail,
            });
        };

        match source.as_str() {
            "binary" => {
                let recorded = votes
                    .get(&(sid.clone(), idx, "binary".into()))
                    .cloned()
                    .unwrap_or_default();
                let r = if recorded.is_empty() {
                    0
                } else {
                    majority_vote(&recorded)
                };
                let expected = binary_advantage(r, advantage.len()).values;
                if !vectors_close(&advantage, &expected) {
                    mismatch(format!("expected broadcast of r={r}"), &mut report);
                }
                report.checked += 1;
            }
            "opd" | "combined" => {
                let old_log_probs: Vec<f64> = parse_f64_array(&event.payload["old_log_probs"])
                    .ok_or("sample_submitted without old_log_probs")?;
                let response_tokens: Vec<usize> = parse_usize_array(&event.payload["response_tokens"])
                    .ok_or("sample_submitted without response_tokens")?;
                let version = event.payload["policy_version"]
                    .as_u64()
                    .ok_or("sample_submitted without policy_version")?;
                let hint_used = source == "opd"
                    || event.payload["hint_used"].as_bool().unwrap_or(false);

                let r = if source == "combined" {
                    let recorded = votes
                        .get(&(sid.clone(), idx, "binary".into()))
                        .cloned()
                        .unwrap_or_default();
                    if recorded.is_empty() {
                        0
                    } else {
                        majority_vote(&recorded)
                    }
                } else {
                    0
                };

                let expected = if hint_used {
                    let Some(hint) = hints.get(&(sid.clone(), idx)) else {
                        mismatch("hint_used but no hint_selected event".into(), &mut report);
                        report.checked += 1;
                        continue;
                    };
                    let request: Vec<Message> =
                        serde_json::from_value(event.payload["request"].clone())
                            .map_err(|e| format!("sample_submitted bad request field: {e}"))?;
                    let snapshot = match snapshots.get(&version) {
                        Some(s) => s.clone(),
                        None => {
                            let path = snapshot_dir.join(format!("v{version}.snap"));
                            let params = read_snapshot(&path)
                                .map_err(|e| format!("snapshot v{version}: {e}"))?;
                            let params = Arc::new(params);
                            snapshots.insert(version, params.clone());
                            params
                        }
                    };
                    let enhanced = match build_enhanced_context(&request, hint) {
                        Ok(e) => e,
                        Err(_) => {
                            mismatch("hint_used but request has no user message".into(), &mut report);
                            report.checked += 1;
                            continue;
                        }
                    };
                    let context = context_from_messages(vocab, &enhanced);
                    let teacher = snapshot
                        .log_probs_forced(&context, &response_tokens)
                        .map_err(|e| format!("teacher scoring failed in replay: {e}"))?;
                    if source == "opd" {
                        opd_advantage(&teacher, &old_log_probs)
                            .map_err(|e| format!("replay opd: {e}"))?
                            .values
                    } else {
                        let w_binary = event.payload["w_binary"].as_f64().unwrap_or(1.0);
                        let w_opd = event.payload["w_opd"].as_f64().unwrap_or(1.0);
                        combined_advantage(r, &teacher, &old_log_probs, w_binary, w_opd)
                            .map_err(|e| format!("replay combined: {e}"))?
                            .values
                    }
                } else {
                    binary_advantage(r, advantage.len()).values
                };
                if !vectors_close(&advantage, &expected) {
                    mismatch("advantage disagrees with recomputation".into(), &mut report);
                }
                report.checked += 1;
            }
            "stepwise" => {
                let step = &event.payload["step"];
                let group_id = step["group_id"]
                    .as_str()
                    .ok_or("stepwise sample without group_id")?
                    .to_string();
                groups.entry(group_id).or_default().push(StepwiseRow {
                    session_id: sid.clone(),
                    turn_index: idx,
                    rollout: step["rollout"].as_u64().ok_or("stepwise sample without rollout")?
                        as usize,
                    step_index: step["step_index"]
                        .as_u64()
                        .ok_or("stepwise sample without step_index")? as usize,
                    outcome: step["outcome"].as_f64().ok_or("stepwise sample without outcome")?,
                    votes: step["votes"]
                        .as_array()
                        .ok_or("stepwise sample without votes")?
                        .iter()
                        .map(|v| v.as_i64().unwrap_or(0) as Score)
                        .collect(),
                    use_process_reward: step["use_process_reward"].as_bool().unwrap_or(true),
                    advantage,
                });
            }
            other => {
                mismatch(format!("unknown source {other}"), &mut report);
                report.checked += 1;
            }
        }
    }

    for (group_id, mut rows) in groups {
        rows.sort_by_key(|r| (r.rollout, r.step_index));
        let rollouts = rows.iter().map(|r| r.rollout).max().map_or(0, |m| m + 1);
        let mut rewards: Vec<Vec<f64>> = vec![Vec::new(); rollouts];
        for row in &rows {
            let votes: Vec<Score> = row
                .votes
                .iter()
                .copied()
                .filter(|v| *v == 1 || *v == -1)
                .collect();
            let reward = if row.use_process_reward && !votes.is_empty() {
                integrated_step_reward(row.outcome, &votes)
            } else {
                row.outcome
            };
            rewards[row.rollout].push(reward);
        }
        let expected = step_index_group_advantage(&StepRewardTable::new(rewards))
            .map_err(|e| format!("replay group {group_id}: {e}"))?;
        for row in rows {
            let want = vec![expected[row.rollout][row.step_index]; row.advantage.len()];
            if !vectors_close(&row.advantage, &want) {
                report.mismatches.push(ReplayMismatch {
                    session_id: row.session_id,
                    turn_index: row.turn_index,
                    source: "stepwise".into(),
                    detail: format!("group {group_id} standardization disagrees"),
                });
            }
            report.checked += 1;
        }
    }

    Ok(report)
}

fn parse_f64_array(value: &Value) -> Option<Vec<f64>> {
    value.as_array()?.iter().map(Value::as_f64).collect()
}

fn parse_usize_array(value: &Value) -> Option<Vec<usize>> {
    value
        .as_array()?
        .iter()
        .map(|v| v.as_u64().map(|u| u as usize))
        .collect()
}

fn vectors_close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= REPLAY_TOLERANCE)
}

// ───────────────────────── tests ─────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::ExternalJudgeConfig;
    use crate::recorder::read_all_records;
    use crate::types::TurnKind;
    use std::time::Instant;
    use tempfile::tempdir;

    fn vocab() -> Vocabulary {
        Vocabulary::default_64()
    }

    fn toks(v: &Vocabulary, words: &[&str]) -> Vec<usize> {
        words.iter().map(|w| v.id_of(w).unwrap()).collect()
    }

    struct EngineHarness {
        engine: JudgeEngine,
        sample_rx: Receiver<Sample>,
        recorder: Arc<Recorder>,
        hub: Arc<SnapshotHub>,
        counters: Arc<PipelineCounters>,
        guarantee: Arc<GuaranteeRegistry>,
        _dir: tempfile::TempDir,
    }

    fn harness(mode: AdvantageMode) -> EngineHarness {
        harness_with(
            PipelineConfig::personal(mode),
            JudgeBackend::scripted(Arc::new(StudentReactionJudge)),
            JudgeBackend::scripted(Arc::new(HindsightHintJudge)),
        )
    }

    fn harness_with(
        config: PipelineConfig,
        backend_binary: JudgeBackend,
        backend_hint: JudgeBackend,
    ) -> EngineHarness {
        let v = vocab();
        let dir = tempdir().unwrap();
        let recorder = Arc::new(
            Recorder::new(dir.path().join("records"), RecorderConfig::default(), Gate::new())
                .unwrap(),
        );
        let hub = Arc::new(SnapshotHub::new(
            initial_personal_policy(&v, 2, PersonalPolicyKnobs::default()),
            8,
        ));
        let (sample_tx, sample_rx) = unbounded();
        let counters = Arc::new(PipelineCounters::default());
        let guarantee = Arc::new(GuaranteeRegistry::default());
        let engine = JudgeEngine::new(
            config,
            v,
            hub.clone(),
            recorder.clone(),
            backend_binary,
            backend_hint,
            sample_tx,
            counters.clone(),
            guarantee.clone(),
            Arc::new(StepCollector::default()),
        );
        EngineHarness {
            engine,
            sample_rx,
            recorder,
            hub,
            counters,
            guarantee,
            _dir: dir,
        }
    }

    /// A realistic finished turn: the response was scored under the current
    /// snapshot, and the persona's reaction is the next-state evidence.
    fn finished_turn(h: &EngineHarness, response_words: &[&str], next_state: &str) -> JudgeJob {
        let v = vocab();
        let request = vec![
            Message::system("homework helper chat keep it natural"),
            Message::user("now solve problem 3"),
        ];
        let response_tokens = toks(&v, response_words);
        let context = context_from_messages(&v, &request);
        let old_log_probs = h
            .hub
            .current()
            .log_probs_forced(&context, &response_tokens)
            .unwrap();
        JudgeJob {
            session_id: "sess-0".into(),
            turn: TurnRecord {
                index: 1,
                kind: TurnKind::MainLine,
                request,
                response_tokens,
                response_text: response_words.join(" "),
                old_log_probs,
                next_state: Some(next_state.to_string()),
                policy_version: h.hub.version(),
            },
            seed: 7,
            attempts: 0,
        }
    }

    #[test]
    fn test_binary_pipeline_broadcasts_majority_and_keeps_zero_votes() {
        let h = harness(AdvantageMode::Binary);

        // Approval reaction → +1 vote → advantage broadcast of +1.
        let job = finished_turn(&h, &["hey", "7", "<eos>"], "cool thanks that reads nice");
        h.engine.process(job).unwrap();
        let sample = h.sample_rx.try_recv().unwrap();
        assert_eq!(sample.advantage, vec![1.0, 1.0, 1.0]);
        assert_eq!(sample.source, AdvantageMode::Binary);
        assert_eq!(sample.policy_version, 0);

        // Neutral reaction → 0 vote → a zero-advantage sample still flows.
        let job = finished_turn(&h, &["hey", "7", "<eos>"], "just looking at it");
        h.engine.process(job).unwrap();
        let sample = h.sample_rx.try_recv().unwrap();
        assert_eq!(sample.advantage, vec![0.0, 0.0, 0.0]);
        assert_eq!(h.counters.submitted.load(Ordering::Relaxed), 2);
        assert_eq!(h.guarantee.len(), 1);
    }

    #[test]
    fn test_opd_pipeline_matches_independent_teacher_recomputation() {
        let h = harness(AdvantageMode::Opd);
        let reaction = "no way that sounds like a bot try again hint: \
                        skip the marker words keep it casual plain\nnext question 2 please answer";
        let job = finished_turn(&h, &["overview", "the", "answer", "<eos>"], reaction);
        let turn = job.turn.clone();
        h.engine.process(job).unwrap();
        let sample = h.sample_rx.try_recv().unwrap();
        assert_eq!(sample.source, AdvantageMode::Opd);

        // Oracle: rebuild the enhanced context and score both ways by hand.
        let v = vocab();
        let enhanced =
            build_enhanced_context(&turn.request, "skip the marker words keep it casual plain")
                .unwrap();
        let teacher = h
            .hub
            .get_version(0)
            .unwrap()
            .log_probs_forced(&context_from_messages(&v, &enhanced), &turn.response_tokens)
            .unwrap();
        let expected: Vec<f64> = teacher
            .iter()
            .zip(&turn.old_log_probs)
            .map(|(t, s)| t - s)
            .collect();
        assert_eq!(sample.advantage, expected);
        // The hint steers toward casual/plain, away from the marker opener.
        assert!(sample.advantage[0] > 0.0 || sample.advantage.iter().any(|&a| a != 0.0));
    }

    #[test]
    fn test_opd_pipeline_drops_turn_without_hint() {
        let h = harness(AdvantageMode::Opd);
        let job = finished_turn(&h, &["hey", "7", "<eos>"], "cool thanks that reads nice");
        h.engine.process(job).unwrap();
        assert!(h.sample_rx.try_recv().is_err());
        assert_eq!(h.counters.dropped_no_hint.load(Ordering::Relaxed), 1);
        assert!(h.guarantee.is_empty(), "opd drops are final");

        h.recorder.flush();
        let records = read_all_records(h.recorder.live_path().parent().unwrap()).unwrap();
        let drop_event = records
            .iter()
            .find(|e| e.kind == RecordKind::SampleDropped)
            .expect("drop recorded");
        assert_eq!(drop_event.payload["reason"], "no_valid_hint");
    }

    #[test]
    fn test_combined_pipeline_adds_hint_term_and_falls_back_to_binary() {
        let h = harness(AdvantageMode::Combined);

        // Complaint with hint: advantage = w_b·r + w_o·(teacher − student).
        let reaction = "too long i zoned out try again hint: \
                        cut the length way down keep it short simple\nnext question 2 please answer";
        let job = finished_turn(&h, &["overview", "the", "answer", "<eos>"], reaction);
        let turn = job.turn.clone();
        h.engine.process(job).unwrap();
        let sample = h.sample_rx.try_recv().unwrap();
        let v = vocab();
        let enhanced =
            build_enhanced_context(&turn.request, "cut the length way down keep it short simple")
                .unwrap();
        let teacher = h
            .hub
            .get_version(0)
            .unwrap()
            .log_probs_forced(&context_from_messages(&v, &enhanced), &turn.response_tokens)
            .unwrap();
        let expected: Vec<f64> = teacher
            .iter()
            .zip(&turn.old_log_probs)
            .map(|(t, s)| 1.0 * f64::from(-1) + 1.0 * (t - s))
            .collect();
        assert_eq!(sample.advantage, expected);

        // Approval, no hint anywhere: falls back to the binary broadcast.
        let job = finished_turn(&h, &["hey", "7", "<eos>"], "cool thanks that reads nice");
        h.engine.process(job).unwrap();
        let sample = h.sample_rx.try_recv().unwrap();
        assert_eq!(sample.advantage, vec![1.0, 1.0, 1.0]);
        assert_eq!(sample.source, AdvantageMode::Combined);
        assert_eq!(h.counters.judged_turns.load(Ordering::Relaxed), 2);
    }

    #[test]
    fn test_backend_unavailable_bumps_attempts_for_requeue() {
        // Nothing listens on this port; the connection is refused.
        let h = harness_with(
            PipelineConfig::personal(AdvantageMode::Binary),
            JudgeBackend::External(ExternalJudgeConfig::new(
                "http://127.0.0.1:9/judge",
                "key",
                "{context}",
            )),
            JudgeBackend::scripted(Arc::new(HindsightHintJudge)),
        );
        let job = finished_turn(&h, &["hey", "<eos>"], "cool thanks that reads nice");
        let requeued = h.engine.process(job).unwrap_err();
        assert_eq!(requeued.attempts, 1);
        assert!(h.sample_rx.try_recv().is_err());
        assert_eq!(h.counters.judged_turns.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn test_at_least_one_guarantee_appends_only_absent_sessions() {
        let h = harness(AdvantageMode::Binary);
        let job_a = finished_turn(&h, &["hey", "<eos>"], "just looking at it");
        let job_b = finished_turn(&h, &["hey", "<eos>"], "cool thanks that reads nice");

        let registry = GuaranteeRegistry::default();
        registry.observe("sess-a", &job_a.turn, &[0.0, 0.0], AdvantageMode::Binary);
        registry.observe("sess-b", &job_b.turn, &[1.0, 1.0], AdvantageMode::Binary);

        // sess-b already has a sample in the batch; only sess-a is added.
        let v = vocab();
        let mut batch = vec![Sample {
            session_id: "sess-b".into(),
            turn_index: 1,
            prompt_tokens: context_from_messages(&v, &job_b.turn.request),
            response_tokens: job_b.turn.response_tokens.clone(),
            old_log_probs: job_b.turn.old_log_probs.clone(),
            advantage: vec![1.0, 1.0],
            policy_version: 0,
            source: AdvantageMode::Binary,
        }];
        let window = registry.take_window();
        let appended = at_least_one_guarantee(&v, &window, &mut batch);
        assert_eq!(appended, 1);
        assert_eq!(batch.len(), 2);
        assert_eq!(batch[1].session_id, "sess-a");
        assert_eq!(batch[1].advantage, vec![0.0, 0.0]);

        // Registry keeps only the most recent judged turn per session.
        let mut newer = job_a.turn.clone();
        newer.index = 3;
        registry.observe("sess-a", &job_a.turn, &[0.0, 0.0], AdvantageMode::Binary);
        registry.observe("sess-a", &newer, &[0.0, 0.0], AdvantageMode::Binary);
        registry.observe("sess-a", &job_a.turn, &[9.0, 9.0], AdvantageMode::Binary);
        let window = registry.take_window();
        assert_eq!(window.len(), 1);
        assert_eq!(window[0].1.turn.index, 3);

        // Empty window leaves the batch alone.
        let mut batch = Vec::new();
        assert_eq!(at_least_one_guarantee(&v, &[], &mut batch), 0);
        assert!(batch.is_empty());
    }

    #[test]
    fn test_trainer_engine_staleness_guarantee_and_conservation() {
        let dir = tempdir().unwrap();
        let config = DeploymentConfig {
            pipeline: PipelineConfig {
                batch_trigger: 4,
                max_staleness: 0,
                ..PipelineConfig::personal(AdvantageMode::Binary)
            },
            ..DeploymentConfig::scripted_personal(AdvantageMode::Binary, 11, dir.path())
        };
        let mut deployment = Deployment::start(config, false).unwrap();

        let h_vocab = vocab();
        let make = |sid: &str, version: u64| {
            let request = vec![Message::user("now solve problem 1")];
            let response_tokens = toks(&h_vocab, &["hey", "7", "<eos>"]);
            let context = context_from_messages(&h_vocab, &request);
            let old = deployment
                .hub
                .current()
                .log_probs_forced(&context, &response_tokens)
                .unwrap();
            Sample {
                session_id: sid.into(),
                turn_index: 1,
                prompt_tokens: context,
                response_tokens,
                old_log_probs: old,
                advantage: vec![1.0, 1.0, 1.0],
                policy_version: version,
                source: AdvantageMode::Binary,
            }
        };

        // First batch: four fresh samples → version 1.
        for i in 0..4 {
            let sample = make(&format!("s{i}"), 0);
            record_sample_submitted(
                &deployment.recorder,
                &deployment.counters,
                &sample,
                &sample_request(&sample),
                false,
                Value::Null,
            );
            deployment.engine.sample_tx.send(sample).unwrap();
        }
        assert_eq!(deployment.try_train().unwrap(), vec![1]);
        assert!(dir.path().join("snapshots/v1.snap").exists());

        // Second batch: two v1-fresh, two v0-stale (max_staleness 0).
        for (i, version) in [(4u32, 1u64), (5, 1), (6, 0), (7, 0)] {
            let sample = make(&format!("s{i}"), version);
            record_sample_submitted(
                &deployment.recorder,
                &deployment.counters,
                &sample,
                &sample_request(&sample),
                false,
                Value::Null,
            );
            deployment.engine.sample_tx.send(sample).unwrap();
        }
        assert_eq!(deployment.try_train().unwrap(), vec![2]);
        assert_eq!(deployment.counters.dropped_stale.load(Ordering::Relaxed), 2);
        assert_eq!(deployment.counters.trained.load(Ordering::Relaxed), 6);

        deployment.recorder.flush();
        let records = read_all_records(&dir.path().join("records")).unwrap();
        let audit = audit_sample_conservation(&records).unwrap();
        assert_eq!(audit.submitted, 8);
        assert_eq!(audit.trained, 6);
        assert_eq!(audit.dropped_for_staleness, 2);
        assert_eq!(audit.pending, 0);
        assert_eq!(audit_version_monotonic(&records).unwrap(), 2);
        deployment.shutdown();
    }

    fn sample_request(sample: &Sample) -> Vec<Message> {
        let _ = sample;
        vec![Message::user("now solve problem 1")]
    }

    #[test]
    fn test_guarantee_reinserts_session_with_queued_but_unbatched_samples() {
        // A session whose only judged turn produced a zero-advantage sample
        // that the batch missed still appears, via its registry entry.
        let h = harness(AdvantageMode::Binary);
        let job = finished_turn(&h, &["hey", "<eos>"], "just looking at it");
        h.engine.process(job).unwrap();
        let _queued_elsewhere = h.sample_rx.try_recv().unwrap();

        let v = vocab();
        let mut batch: Vec<Sample> = Vec::new();
        let window = h.guarantee.take_window();
        let appended = at_least_one_guarantee(&v, &window, &mut batch);
        assert_eq!(appended, 1);
        assert_eq!(batch[0].session_id, "sess-0");
        assert!(batch[0].advantage.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn test_lockstep_personal_first_swap_after_exact_trigger() {
        let dir = tempdir().unwrap();
        let config = ExperimentConfig {
            updates: 1,
            clients: 2,
            batch_trigger: 4,
            eval_updates: vec![],
            ..ExperimentConfig::personal(AdvantageMode::Combined, 21)
        };
        let summary = run_personal_experiment(&config, dir.path()).unwrap();
        assert_eq!(summary.updates, 1);
        assert_eq!(summary.final_version, 1);

        let records = read_all_records(&dir.path().join("records")).unwrap();
        let swap_at = records
            .iter()
            .position(|e| e.kind == RecordKind::WeightSwap)
            .expect("swap recorded");
        let submitted_before = records[..swap_at]
            .iter()
            .filter(|e| e.kind == RecordKind::SampleSubmitted)
            .count();
        assert_eq!(submitted_before, 4, "first swap after exactly the trigger");
        // Rotation accompanied the swap: the swap event sits in the rotated
        // file and the pre-swap file is archived.
        assert_eq!(records[swap_at].record_version, 1);
        assert!(dir.path().join("records/archive/v0.jsonl").exists());
    }

    #[test]
    fn test_personal_experiment_deterministic_and_replayable() {
        let base = ExperimentConfig {
            updates: 2,
            clients: 2,
            batch_trigger: 4,
            eval_updates: vec![0, 2],
            eval_problems: 4,
            ..ExperimentConfig::personal(AdvantageMode::Combined, 33)
        };
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let a = run_personal_experiment(&base, dir_a.path()).unwrap();
        let b = run_personal_experiment(&base, dir_b.path()).unwrap();
        assert_eq!(a, b, "identical seeds reproduce the run bit for bit");
        assert_eq!(a.trajectory.len(), 2);

        // The records replay with zero mismatches.
        let records = read_all_records(&dir_a.path().join("records")).unwrap();
        let report =
            replay_advantages(&records, &dir_a.path().join("snapshots"), &vocab()).unwrap();
        assert!(report.checked > 0);
        assert_eq!(report.mismatches, Vec::new());
    }

    #[test]
    fn test_opd_submits_fewer_samples_than_binary_on_equal_traffic() {
        let budget = 24;
        let run = |mode| {
            let dir = tempdir().unwrap();
            let config = ExperimentConfig {
                turn_budget: Some(budget),
                clients: 2,
                eval_updates: vec![],
                ..ExperimentConfig::personal(mode, 44)
            };
            run_personal_experiment(&config, dir.path()).unwrap()
        };
        let binary = run(AdvantageMode::Binary);
        let opd = run(AdvantageMode::Opd);
        assert_eq!(binary.turns_served, budget);
        assert_eq!(opd.turns_served, budget);
        assert_eq!(
            binary.submitted, binary.judged_turns,
            "binary keeps every judged turn"
        );
        assert!(
            opd.submitted < binary.submitted,
            "hint filtering must be sparser: {} vs {}",
            opd.submitted,
            binary.submitted
        );
        assert_eq!(
            opd.submitted + opd.dropped_no_hint,
            opd.judged_turns,
            "every judged turn is either kept or dropped for want of a hint"
        );
    }

    #[test]
    fn test_stepwise_group_assembly_matches_direct_standardization() {
        let dir = tempdir().unwrap();
        let config = StepwiseConfig {
            updates: 2,
            rollouts_per_task: 3,
            horizon: 2,
            m_votes: 1,
            flip_prob: 0.0,
            eval_updates: vec![],
            ..StepwiseConfig::general(55, true)
        };
        let summary = run_stepwise_experiment(&config, dir.path()).unwrap();
        assert_eq!(summary.updates, 2);
        assert_eq!(summary.submitted, 2 * 3 * 2, "G·H samples per group");
        assert_eq!(summary.trained, summary.submitted);

        let records = read_all_records(&dir.path().join("records")).unwrap();
        // Per-step groups never exceed the rollout count.
        let mut group_sizes: HashMap<(String, u64), usize> = HashMap::new();
        for event in &records {
            if event.kind == RecordKind::SampleSubmitted {
                let group = event.payload["step"]["group_id"].as_str().unwrap().to_string();
                let step = event.payload["step"]["step_index"].as_u64().unwrap();
                *group_sizes.entry((group, step)).or_default() += 1;
            }
        }
        assert!(group_sizes.values().all(|&n| n <= 3));
        assert_eq!(group_sizes.len(), 4, "two groups, two step indices each");

        // Replay reproduces the standardized advantages exactly.
        let report =
            replay_advantages(&records, &dir.path().join("snapshots"), &vocab()).unwrap();
        assert_eq!(report.checked, 12);
        assert_eq!(report.mismatches, Vec::new());
    }

    #[test]
    fn test_free_running_loops_judge_and_train_without_driver() {
        let dir = tempdir().unwrap();
        let mut config = DeploymentConfig::scripted_personal(AdvantageMode::Binary, 66, dir.path());
        config.pipeline.batch_trigger = 4;
        config.trainer.batch_trigger = 4;
        let mut deployment = Deployment::start(config, true).unwrap();

        let persona = Persona::student(&vocab());
        crate::worlds::run_persona_instance(
            &deployment.url(),
            EXPERIMENT_API_KEY,
            &persona,
            "free-0",
            6,
            66,
            0,
            true,
        )
        .unwrap();

        // Six judged turns → six samples → at least one update of four.
        let deadline = Instant::now() + Duration::from_secs(10);
        while deployment.counters.updates.load(Ordering::Relaxed) < 1 {
            assert!(Instant::now() < deadline, "trainer never fired");
            thread::sleep(Duration::from_millis(5));
        }
        assert!(deployment.hub.version() >= 1);
        deployment.shutdown();
    }

    #[test]
    fn test_pipeline_config_validation() {
        assert!(PipelineConfig::personal(AdvantageMode::Binary).validate().is_ok());
        assert!(PipelineConfig::general().validate().is_ok());

        let mut bad = PipelineConfig::personal(AdvantageMode::Binary);
        bad.m_votes = 0;
        assert!(bad.validate().is_err());

        let mut bad = PipelineConfig::general();
        bad.rollouts_per_task = 1;
        assert!(bad.validate().is_err());
    }
}
