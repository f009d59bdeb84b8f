//! Hot-path micro benchmarks: the serving-side sampling and scoring
//! kernels, the training-side loss and standardization kernels, and the
//! recorder enqueue that sits inline in every loop.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use nextstate_core::advantage::{step_index_group_advantage, StepRewardTable};
use nextstate_core::recorder::{RecordEvent, RecordKind, Recorder, RecorderConfig};
use nextstate_core::sync::Gate;
use nextstate_core::trainer::ppo_loss;
use nextstate_core::worlds::{initial_personal_policy, PersonalPolicyKnobs};
use nextstate_core::Vocabulary;

fn bench_sampling(c: &mut Criterion) {
    let vocab = Vocabulary::default_64();
    let params = initial_personal_policy(&vocab, 2, PersonalPolicyKnobs::default());
    let context: Vec<usize> = (0..24).map(|i| (i * 7) % vocab.size()).collect();
    c.bench_function("sample_16_tokens", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            black_box(params.sample(black_box(&context), 1.0, 16, seed).unwrap())
        })
    });
}

fn bench_forced_scoring(c: &mut Criterion) {
    let vocab = Vocabulary::default_64();
    let params = initial_personal_policy(&vocab, 2, PersonalPolicyKnobs::default());
    let context: Vec<usize> = (0..24).map(|i| (i * 7) % vocab.size()).collect();
    let response: Vec<usize> = (0..12).map(|i| (i * 11) % vocab.size()).collect();
    c.bench_function("log_probs_forced_12_tokens", |b| {
        b.iter(|| black_box(params.log_probs_forced(&context, &response).unwrap()))
    });
    let weights = vec![0.5; response.len()];
    c.bench_function("grad_log_probs_forced_12_tokens", |b| {
        b.iter(|| {
            black_box(
                params
                    .grad_log_probs_forced(&context, &response, &weights)
                    .unwrap(),
            )
        })
    });
}

fn bench_ppo_loss(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = 256;
    let new: Vec<f64> = (0..t).map(|_| -rng.gen::<f64>() * 4.0).collect();
    let old: Vec<f64> = new.iter().map(|l| l + rng.gen::<f64>() * 0.6 - 0.3).collect();
    let advantage: Vec<f64> = (0..t).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    c.bench_function("ppo_loss_256_tokens", |b| {
        b.iter(|| black_box(ppo_loss(&new, &old, &advantage, 0.2, 0.28).unwrap()))
    });
}

fn bench_step_standardization(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rewards: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
        .collect();
    let table = StepRewardTable::new(rewards);
    c.bench_function("step_index_group_advantage_8x4", |b| {
        b.iter(|| black_box(step_index_group_advantage(&table).unwrap()))
    });
}

fn bench_recorder_enqueue(c: &mut Criterion) {
    let dir = tempfile::tempdir().expect("tempdir");
    let recorder = Recorder::new(dir.path(), RecorderConfig::default(), Gate::new())
        .expect("recorder");
    let event = RecordEvent::new(
        RecordKind::Turn,
        Some("bench".into()),
        Some(0),
        serde_json::json!({ "response_text": "casual plain words", "policy_version": 3 }),
    );
    c.bench_function("recorder_enqueue", |b| {
        b.iter(|| recorder.record(black_box(event.clone())))
    });
    recorder.flush();
}

criterion_group!(
    benches,
    bench_sampling,
    bench_forced_scoring,
    bench_ppo_loss,
    bench_step_standardization,
    bench_recorder_enqueue
);
criterion_main!(benches);
