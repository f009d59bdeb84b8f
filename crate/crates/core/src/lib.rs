//! Online reinforcement learning from next-state signals, at desk scale.
//!
//! A small autoregressive token policy is served over HTTP while four loops
//! run concurrently and never block one another:
//!
//! * the **gateway** serves generation requests and swaps policy snapshots,
//! * **worlds** drive simulated conversations and tasks against the gateway,
//! * the **judge** scores finished turns from whatever the world said next,
//! * the **trainer** turns judged turns into gradient updates.
//!
//! The loops communicate through bounded channels and an atomically swapped
//! snapshot handle; everything that crosses a loop boundary is a plain value.
//! Two reward routes are implemented on top of that skeleton: a binary
//! outcome route, a hindsight-guided distillation route, their weighted
//! combination, and a step-wise variant that folds per-step verdicts into an
//! episode outcome.

pub mod advantage;
pub mod gateway;
pub mod judge;
pub mod orchestrator;
pub mod policy;
pub mod recorder;
pub mod session;
pub mod sync;
pub mod trainer;
pub mod types;
pub mod worlds;

pub use orchestrator::{
    run_experiment, ExperimentConfig, ExperimentSpec, OrchestratorError, PipelineConfig, Preset,
    RunSummary, StepwiseConfig,
};
pub use policy::{GenerationResult, PolicyParams, SnapshotHub, Vocabulary};
pub use types::{
    AdvantageMode, Message, Role, Sample, Score, TokenId, TurnKind, TurnRecord, Verdict,
};
