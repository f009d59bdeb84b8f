//! The policy-gradient trainer: asymmetric-clip PPO surrogate with a k3 KL
//! penalty, per-batch parameter updates and version bumps, plus the
//! finite-difference oracle the gradient tests are anchored to.
//!
//! Loss assembly: per sample, the per-token surrogate and KL terms are
//! averaged over that sample's tokens (so loss scale is independent of
//! response length), then averaged over samples:
//!
//! ```text
//! L = mean_s [ −mean_t min(ρ_t A_t, clip(ρ_t, 1−ε_low, 1+ε_high) A_t) ]
//!   + β_KL · mean_s [ mean_t (r_t − 1 − log r_t) ]        r_t = exp(ref−new)
//! ```
//!
//! The KL reference is the rollout-time snapshot: the stored old log-probs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{PolicyGrad, PolicyParams};
use crate::types::Sample;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty batch")]
    EmptyBatch,
}

/// Optimizer choice; Adam keeps per-parameter moments inside [`Trainer`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    /// Adam with the default moment decays and decoupled weight decay.
    pub fn default_adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub lr: f64,
    /// Lower clip bound offset: ratios below 1 − eps_low stop contributing.
    pub eps_low: f64,
    /// Upper clip bound offset; may exceed eps_low (asymmetric clipping).
    pub eps_high: f64,
    /// KL penalty coefficient against the rollout-time reference.
    pub kl_coef: f64,
    /// Training fires once this many samples are queued.
    pub batch_trigger: usize,
    /// Samples generated more than this many versions ago are dropped.
    pub max_staleness: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lr: 0.05,
            eps_low: 0.2,
            eps_high: 0.28,
            kl_coef: 0.02,
            batch_trigger: 16,
            max_staleness: 2,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

/// Observability for one update, recorded after every train step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_pg: f64,
    pub loss_kl: f64,
    pub ratio_mean: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Fraction of tokens where the clipped branch was strictly active.
    pub clipped_fraction: f64,
    pub samples_used: usize,
    /// Samples in the batch whose generating version was older than the
    /// parameters being updated (trained anyway; ratios absorb staleness).
    pub stale_samples: usize,
    pub new_version: u64,
}

// ───────────────────────── loss pieces ─────────────────────────

/// Clipped-surrogate loss over one response and its gradient with respect to
/// the new log-probs.
///
/// Per token, ρ = exp(new − old) and the contribution is
/// −min(ρA, clip(ρ, 1−eps_low, 1+eps_high)·A), averaged over tokens. The
/// gradient is −Aρ/T where the unclipped branch is active (ties resolve to
/// the unclipped branch, so ρ inside the clip range carries the usual
/// policy-gradient term) and exactly 0 where the clipped branch is strictly
/// smaller.
pub fn ppo_loss(
    new_log_probs: &[f64],
    old_log_probs: &[f64],
    advantages: &[f64],
    eps_low: f64,
    eps_high: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    let t = new_log_probs.len();
    if old_log_probs.len() != t || advantages.len() != t {
        return Err(TrainError::LengthMismatch {
            left: t,
            right: old_log_probs.len().max(advantages.len()),
        });
    }
    if t == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let inv_t = 1.0 / t as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(t);
    for i in 0..t {
        let ratio = (new_log_probs[i] - old_log_probs[i]).exp();
        let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
        let unclipped_term = ratio * advantages[i];
        let clipped_term = clipped * advantages[i];
        if unclipped_term <= clipped_term {
            loss -= unclipped_term * inv_t;
            grad.push(-advantages[i] * ratio * inv_t);
        } else {
            loss -= clipped_term * inv_t;
            grad.push(0.0);
        }
    }
    Ok((loss, grad))
}

/// k3 KL estimator against a reference distribution and its gradient with
/// respect to the new log-probs: with r = exp(ref − new), the mean of
/// r − 1 − log r (nonnegative), gradient (1 − r)/T per token.
pub fn kl_penalty(
    new_log_probs: &[f64],
    ref_log_probs: &[f64],
) -> Result<(f64, Vec<f64>), TrainError> {
    let t = new_log_probs.len();
    if ref_log_probs.len() != t {
        return Err(TrainError::LengthMismatch {
            left: t,
            right: ref_log_probs.len(),
        });
    }
    if t == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let inv_t = 1.0 / t as f64;
    let mut kl = 0.0;
    let mut grad = Vec::with_capacity(t);
    for i in 0..t {
        let log_r = ref_log_probs[i] - new_log_probs[i];
        let r = log_r.exp();
        kl += (r - 1.0 - log_r) * inv_t;
        grad.push((1.0 - r) * inv_t);
    }
    Ok((kl, grad))
}

/// The full batch loss under `params`, recomputing new log-probs by forced
/// scoring. Shared by the training path and the finite-difference oracle so
/// both differentiate the identical function.
pub fn total_loss(
    params: &PolicyParams,
    batch: &[Sample],
    config: &TrainerConfig,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut pg_sum = 0.0;
    let mut kl_sum = 0.0;
    for sample in batch {
        let new_log_probs = params
            .log_probs_forced(&sample.prompt_tokens, &sample.response_tokens)
            .expect("sample tokens fit the vocabulary");
        let (pg, _) = ppo_loss(
            &new_log_probs,
            &sample.old_log_probs,
            &sample.advantage,
            config.eps_low,
            config.eps_high,
        )?;
        let (kl, _) = kl_penalty(&new_log_probs, &sample.old_log_probs)?;
        pg_sum += pg;
        kl_sum += kl;
    }
    let s = batch.len() as f64;
    Ok(pg_sum / s + config.kl_coef * kl_sum / s)
}

/// Central-difference gradient of [`total_loss`] over every parameter; the
/// verification oracle the analytic gradient is held against.
pub fn finite_diff_grad(
    params: &PolicyParams,
    batch: &[Sample],
    config: &TrainerConfig,
    h: f64,
) -> Result<PolicyGrad, TrainError> {
    assert!(h > 0.0);
    let mut probe = params.clone();
    let mut grad = PolicyGrad::zeros(params.vocab_size(), params.context_len());
    for i in 0..params.param_count() {
        let original = probe.get_flat(i);
        probe.set_flat(i, original + h);
        let plus = total_loss(&probe, batch, config)?;
        probe.set_flat(i, original - h);
        let minus = total_loss(&probe, batch, config)?;
        probe.set_flat(i, original);
        let slot = (plus - minus) / (2.0 * h);
        // PolicyGrad has the same flat layout as PolicyParams.
        if i < params.vocab_size() {
            grad.bias[i] = slot;
        } else {
            grad.ctx[i - params.vocab_size()] = slot;
        }
    }
    Ok(grad)
}

// ───────────────────────── trainer ─────────────────────────

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Owns optimizer state across updates and turns sample batches into new
/// parameter snapshots.
pub struct Trainer {
    pub config: TrainerConfig,
    adam: Option<AdamState>,
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Self {
        Trainer { config, adam: None }
    }

    /// Analytic gradient of [`total_loss`] via the chain rule through the
    /// policy's forced-scoring gradient.
    pub fn analytic_grad(
        &self,
        params: &PolicyParams,
        batch: &[Sample],
    ) -> Result<PolicyGrad, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let inv_s = 1.0 / batch.len() as f64;
        let mut grad = PolicyGrad::zeros(params.vocab_size(), params.context_len());
        for sample in batch {
            let new_log_probs = params
                .log_probs_forced(&sample.prompt_tokens, &sample.response_tokens)
                .expect("sample tokens fit the vocabulary");
            let (_, pg_grad) = ppo_loss(
                &new_log_probs,
                &sample.old_log_probs,
                &sample.advantage,
                self.config.eps_low,
                self.config.eps_high,
            )?;
            let (_, kl_grad) = kl_penalty(&new_log_probs, &sample.old_log_probs)?;
            let weights: Vec<f64> = pg_grad
                .iter()
                .zip(&kl_grad)
                .map(|(pg, kl)| (pg + self.config.kl_coef * kl) * inv_s)
                .collect();
            let sample_grad = params
                .grad_log_probs_forced(&sample.prompt_tokens, &sample.response_tokens, &weights)
                .expect("sample tokens fit the vocabulary");
            grad.add_scaled(&sample_grad, 1.0);
        }
        Ok(grad)
    }

    /// One update: recompute log-probs under `params`, assemble the loss,
    /// apply one optimizer step, bump the version.
    ///
    /// A batch whose gradient is identically zero (all-zero advantages with
    /// no KL pressure) leaves the parameters untouched but still bumps the
    /// version: bookkeeping batches must not decay the policy.
    pub fn train_step(
        &mut self,
        params: &PolicyParams,
        batch: &[Sample],
    ) -> Result<(PolicyParams, TrainReport), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }

        // Report statistics alongside the loss terms.
        let mut loss_pg = 0.0;
        let mut loss_kl = 0.0;
        let mut ratio_min = f64::INFINITY;
        let mut ratio_max = f64::NEG_INFINITY;
        let mut ratio_sum = 0.0;
        let mut token_count = 0usize;
        let mut clipped_tokens = 0usize;
        let mut stale_samples = 0usize;
        for sample in batch {
            if sample.policy_version < params.version {
                stale_samples += 1;
            }
            let new_log_probs = params
                .log_probs_forced(&sample.prompt_tokens, &sample.response_tokens)
                .expect("sample tokens fit the vocabulary");
            let (pg, pg_grad) = ppo_loss(
                &new_log_probs,
                &sample.old_log_probs,
                &sample.advantage,
                self.config.eps_low,
                self.config.eps_high,
            )?;
            let (kl, _) = kl_penalty(&new_log_probs, &sample.old_log_probs)?;
            loss_pg += pg;
            loss_kl += kl;
            for (i, (new, old)) in new_log_probs.iter().zip(&sample.old_log_probs).enumerate() {
                let ratio = (new - old).exp();
                ratio_min = ratio_min.min(ratio);
                ratio_max = ratio_max.max(ratio);
                ratio_sum += ratio;
                token_count += 1;
                // ppo_loss reports 0 gradient exactly when the clipped
                // branch was strictly active for a token with signal.
                if pg_grad[i] == 0.0 && sample.advantage[i] != 0.0 {
                    clipped_tokens += 1;
                }
            }
        }
        let s = batch.len() as f64;
        loss_pg /= s;
        loss_kl /= s;

        let grad = self.analytic_grad(params, batch)?;
        let mut next = params.clone();
        if grad.max_abs() > 0.0 {
            self.apply_update(&mut next, &grad);
        }
        next.version = params.version + 1;

        let report = TrainReport {
            loss_pg,
            loss_kl,
            ratio_mean: ratio_sum / token_count.max(1) as f64,
            ratio_min,
            ratio_max,
            clipped_fraction: clipped_tokens as f64 / token_count.max(1) as f64,
            samples_used: batch.len(),
            stale_samples,
            new_version: next.version,
        };
        Ok((next, report))
    }

    fn apply_update(&mut self, params: &mut PolicyParams, grad: &PolicyGrad) {
        let n = params.param_count();
        match self.config.optimizer {
            OptimizerKind::Sgd => {
                for i in 0..n {
                    let p = params.get_flat(i);
                    params.set_flat(i, p - self.config.lr * grad.get_flat(i));
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                weight_decay,
            } => {
                let state = self.adam.get_or_insert_with(|| AdamState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    step: 0,
                });
                assert_eq!(state.m.len(), n, "optimizer state matches parameter shape");
                state.step += 1;
                let t = state.step as i32;
                let bias1 = 1.0 - beta1.powi(t);
                let bias2 = 1.0 - beta2.powi(t);
                const ADAM_EPS: f64 = 1e-8;
                for i in 0..n {
                    let g = grad.get_flat(i);
                    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = state.m[i] / bias1;
                    let v_hat = state.v[i] / bias2;
                    let p = params.get_flat(i);
                    // Decoupled weight decay.
                    let update = m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * p;
                    params.set_flat(i, p - self.config.lr * update);
                }
            }
        }
    }
}
