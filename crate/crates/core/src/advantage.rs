//! The four advantage constructions: binary broadcast, hindsight-distillation
//! token-level differences, their weighted combination, and integrated
//! step-wise rewards with step-index group standardization.
//!
//! All pure functions, callable from any loop.

use thiserror::Error;

use crate::types::{AdvantageMode, Message, Role, Score};

/// Standardization floor added to the group standard deviation.
pub const STD_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum AdvantageError {
    #[error("length mismatch: teacher {teacher} vs student {student}")]
    LengthMismatch { teacher: usize, student: usize },
    #[error("context has no user message to attach the hint to")]
    NoUserMessage,
    #[error("step-index grouping needs at least 2 rollouts, got {0}")]
    TooFewRollouts(usize),
}

/// Per-token advantages plus the construction that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub source: AdvantageMode,
}

/// Broadcasts the final scalar reward over every response token.
pub fn binary_advantage(r_final: Score, response_len: usize) -> AdvantageVector {
    assert!(response_len >= 1, "empty response has no advantage");
    AdvantageVector {
        values: vec![f64::from(r_final); response_len],
        source: AdvantageMode::Binary,
    }
}

/// Rebuilds the context with the hindsight hint appended to the last user
/// message: `original ⊕ "\n[user's hint / instruction]\n" ⊕ hint`. Every
/// other message is untouched.
pub fn build_enhanced_context(
    messages: &[Message],
    hint: &str,
) -> Result<Vec<Message>, AdvantageError> {
    let last_user = messages
        .iter()
        .rposition(|m| m.role == Role::User)
        .ok_or(AdvantageError::NoUserMessage)?;
    let mut enhanced = messages.to_vec();
    enhanced[last_user].content = format!(
        "{}\n[user's hint / instruction]\n{}",
        enhanced[last_user].content, hint
    );
    Ok(enhanced)
}

/// Token-level distillation advantage: teacher log-probs (scored under the
/// hint-enhanced context) minus the student's rollout-time log-probs.
/// Positive where the hint-informed teacher would have upweighted the token.
pub fn opd_advantage(
    teacher_log_probs: &[f64],
    student_log_probs: &[f64],
) -> Result<AdvantageVector, AdvantageError> {
    if teacher_log_probs.len() != student_log_probs.len() {
        return Err(AdvantageError::LengthMismatch {
            teacher: teacher_log_probs.len(),
            student: student_log_probs.len(),
        });
    }
    Ok(AdvantageVector {
        values: teacher_log_probs
            .iter()
            .zip(student_log_probs)
            .map(|(t, s)| t - s)
            .collect(),
        source: AdvantageMode::Opd,
    })
}

/// Weighted sum of the binary and distillation advantages,
/// `w_binary · r_final + w_opd · (teacher − student)` per token.
pub fn combined_advantage(
    r_final: Score,
    teacher_log_probs: &[f64],
    student_log_probs: &[f64],
    w_binary: f64,
    w_opd: f64,
) -> Result<AdvantageVector, AdvantageError> {
    let opd = opd_advantage(teacher_log_probs, student_log_probs)?;
    Ok(AdvantageVector {
        values: opd
            .values
            .iter()
            .map(|diff| w_binary * f64::from(r_final) + w_opd * diff)
            .collect(),
        source: AdvantageMode::Combined,
    })
}

/// Integrated reward for one step: episode outcome plus the mean of the
/// process votes.
pub fn integrated_step_reward(outcome: f64, process_votes: &[Score]) -> f64 {
    assert!(!process_votes.is_empty(), "need at least one process vote");
    debug_assert!(
        process_votes.iter().all(|v| *v == 1 || *v == -1),
        "process votes must be +1 or -1"
    );
    let mean = process_votes.iter().map(|&v| f64::from(v)).sum::<f64>()
        / process_votes.len() as f64;
    outcome + mean
}

/// Integrated per-step rewards for a group of rollouts of the same task.
/// Rollout lengths may differ (early termination).
#[derive(Debug, Clone, Default)]
pub struct StepRewardTable {
    /// `rewards[g][t]` is rollout g's integrated reward at step t.
    pub rewards: Vec<Vec<f64>>,
}

impl StepRewardTable {
    pub fn new(rewards: Vec<Vec<f64>>) -> Self {
        StepRewardTable { rewards }
    }
}

/// Standardizes rewards across rollouts sharing a step index.
///
/// For step t, the group is every rollout long enough to have a step t.
/// Within a group of at least 2 with nonzero population std, the advantage is
/// `(R − mean) / (std + ε)`; singleton groups and zero-std groups get 0.
/// Returns one advantage per (rollout, step), in the table's shape.
pub fn step_index_group_advantage(
    table: &StepRewardTable,
) -> Result<Vec<Vec<f64>>, AdvantageError> {
    let g = table.rewards.len();
    if g < 2 {
        return Err(AdvantageError::TooFewRollouts(g));
    }
    let mut out: Vec<Vec<f64>> = table
        .rewards
        .iter()
        .map(|r| vec![0.0; r.len()])
        .collect();
    let max_len = table.rewards.iter().map(|r| r.len()).max().unwrap_or(0);

    for t in 0..max_len {
        let members: Vec<usize> = (0..g).filter(|&i| table.rewards[i].len() > t).collect();
        if members.len() < 2 {
            continue; // singleton (or empty) group: advantage stays 0
        }
        let n = members.len() as f64;
        let mean = members.iter().map(|&i| table.rewards[i][t]).sum::<f64>() / n;
        let var = members
            .iter()
            .map(|&i| {
                let d = table.rewards[i][t] - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if std == 0.0 {
            continue; // degenerate group: no signal, advantage stays 0
        }
        for &i in &members {
            out[i][t] = (table.rewards[i][t] - mean) / (std + STD_EPS);
        }
    }
    Ok(out)
}

/// Broadcasts one step's scalar advantage over that step's response tokens.
pub fn broadcast_step_advantage(step_advantage: f64, token_count: usize) -> Vec<f64> {
    vec![step_advantage; token_count]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn test_binary_advantage_broadcasts() {
        assert_eq!(binary_advantage(1, 3).values, vec![1.0, 1.0, 1.0]);
        assert_eq!(binary_advantage(0, 5).values, vec![0.0; 5]);
        assert_eq!(binary_advantage(-1, 1).values, vec![-1.0]);
        assert_eq!(binary_advantage(1, 2).source, AdvantageMode::Binary);
    }

    #[test]
    fn test_enhanced_context_appends_to_last_user_message() {
        let messages = vec![Message::user("solve q1")];
        let enhanced = build_enhanced_context(&messages, "be brief").unwrap();
        assert_eq!(
            enhanced[0].content,
            "solve q1\n[user's hint / instruction]\nbe brief"
        );

        let messages = vec![
            Message::system("sys"),
            Message::user("first"),
            Message::assistant("answer"),
            Message::user("again"),
        ];
        let enhanced = build_enhanced_context(&messages, "h").unwrap();
        assert_eq!(enhanced[0], messages[0]);
        assert_eq!(enhanced[1], messages[1]);
        assert_eq!(enhanced[2], messages[2]);
        assert_eq!(enhanced[3].content, "again\n[user's hint / instruction]\nh");
        // Exactly one message differs.
        let diffs = enhanced
            .iter()
            .zip(&messages)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(diffs, 1);
    }

    #[test]
    fn test_enhanced_context_requires_a_user_message() {
        let messages = vec![Message::system("only system")];
        assert_eq!(
            build_enhanced_context(&messages, "h"),
            Err(AdvantageError::NoUserMessage)
        );
    }

    #[test]
    fn test_opd_advantage_elementwise_difference() {
        let adv = opd_advantage(&[-0.1, -2.0], &[-1.1, -1.0]).unwrap();
        assert_eq!(adv.values, vec![1.0, -1.0]);
        assert_eq!(adv.source, AdvantageMode::Opd);

        let zero = opd_advantage(&[-0.5, -0.5], &[-0.5, -0.5]).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));

        assert_eq!(
            opd_advantage(&[-1.0; 3], &[-1.0; 4]),
            Err(AdvantageError::LengthMismatch {
                teacher: 3,
                student: 4
            })
        );
    }

    #[test]
    fn test_combined_advantage_weighted_sum() {
        // r=+1, diffs [1.0, -1.0], weights (1,1) → [2.0, 0.0]
        let adv = combined_advantage(1, &[-0.1, -2.0], &[-1.1, -1.0], 1.0, 1.0).unwrap();
        assert_eq!(adv.values, vec![2.0, 0.0]);
        assert_eq!(adv.source, AdvantageMode::Combined);
    }

    #[test]
    fn test_combined_degenerates_to_each_route() {
        let teacher = [-0.2, -1.5, -0.9];
        let student = [-1.0, -1.0, -1.0];
        let binary_only = combined_advantage(-1, &teacher, &student, 1.0, 0.0).unwrap();
        assert_eq!(binary_only.values, binary_advantage(-1, 3).values);
        let opd_only = combined_advantage(-1, &teacher, &student, 0.0, 1.0).unwrap();
        assert_eq!(opd_only.values, opd_advantage(&teacher, &student).unwrap().values);
    }

    #[test]
    fn test_integrated_step_reward_examples() {
        assert_eq!(integrated_step_reward(1.0, &[1, 1, 1]), 2.0);
        let r = integrated_step_reward(0.0, &[1, -1, -1]);
        assert!((r - (-1.0 / 3.0)).abs() < 1e-15);
        assert_eq!(integrated_step_reward(1.0, &[-1]), 0.0);
    }

    #[test]
    fn test_step_grouping_zero_variance_group() {
        let table = StepRewardTable::new(vec![vec![2.0], vec![2.0]]);
        let adv = step_index_group_advantage(&table).unwrap();
        assert_eq!(adv, vec![vec![0.0], vec![0.0]]);
    }

    #[test]
    fn test_step_grouping_symmetric_pair() {
        let table = StepRewardTable::new(vec![vec![1.0], vec![-1.0]]);
        let adv = step_index_group_advantage(&table).unwrap();
        // mean 0, population std 1, so ±1/(1+ε).
        let expected = 1.0 / (1.0 + STD_EPS);
        assert!((adv[0][0] - expected).abs() < 1e-12);
        assert!((adv[1][0] + expected).abs() < 1e-12);
    }

    #[test]
    fn test_step_grouping_variable_lengths() {
        // Lengths {3, 3, 1}: step 0 groups all three, steps 1 and 2 group
        // the two long rollouts, nothing is a singleton here.
        let table = StepRewardTable::new(vec![
            vec![1.0, 2.0, 3.0],
            vec![0.0, 0.0, 1.0],
            vec![-1.0],
        ]);
        let adv = step_index_group_advantage(&table).unwrap();
        assert_eq!(adv[2].len(), 1);

        // Step 0: mean 0, std = sqrt(2/3) over {1, 0, -1}.
        let std0 = (2.0_f64 / 3.0).sqrt();
        assert!((adv[0][0] - 1.0 / (std0 + STD_EPS)).abs() < 1e-12);
        assert!((adv[1][0] - 0.0).abs() < 1e-12);
        assert!((adv[2][0] + 1.0 / (std0 + STD_EPS)).abs() < 1e-12);

        // Step 1: {2, 0}: mean 1, std 1.
        assert!((adv[0][1] - 1.0 / (1.0 + STD_EPS)).abs() < 1e-12);
        assert!((adv[1][1] + 1.0 / (1.0 + STD_EPS)).abs() < 1e-12);
    }

    #[test]
    fn test_step_grouping_singleton_step_gets_zero() {
        // Second step exists only in rollout 0.
        let table = StepRewardTable::new(vec![vec![1.0, 5.0], vec![0.0]]);
        let adv = step_index_group_advantage(&table).unwrap();
        assert_eq!(adv[0][1], 0.0);
    }

    #[test]
    fn test_step_grouping_requires_two_rollouts() {
        let table = StepRewardTable::new(vec![vec![1.0]]);
        assert_eq!(
            step_index_group_advantage(&table),
            Err(AdvantageError::TooFewRollouts(1))
        );
    }

    #[test]
    fn test_broadcast_step_advantage() {
        assert_eq!(broadcast_step_advantage(0.5, 3), vec![0.5, 0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn prop_advantage_lengths_always_match_response(
            len in 1usize..40,
            r in prop::sample::select(vec![-1i32, 0, 1]),
        ) {
            let teacher: Vec<f64> = (0..len).map(|i| -(i as f64) - 0.5).collect();
            let student: Vec<f64> = (0..len).map(|i| -(i as f64) - 1.0).collect();
            prop_assert_eq!(binary_advantage(r, len).values.len(), len);
            prop_assert_eq!(opd_advantage(&teacher, &student).unwrap().values.len(), len);
            prop_assert_eq!(
                combined_advantage(r, &teacher, &student, 1.0, 1.0).unwrap().values.len(),
                len
            );
        }

        #[test]
        fn prop_combined_is_linear_in_weights(
            r in prop::sample::select(vec![-1i32, 0, 1]),
            teacher in prop::collection::vec(-5.0f64..0.0, 1..10),
            w_b in -2.0f64..2.0,
            w_o in -2.0f64..2.0,
            alpha in 0.1f64..3.0,
        ) {
            let student: Vec<f64> = teacher.iter().map(|t| t - 0.3).collect();
            let base = combined_advantage(r, &teacher, &student, w_b, w_o).unwrap();
            let scaled = combined_advantage(r, &teacher, &student, alpha * w_b, alpha * w_o).unwrap();
            for (b, s) in base.values.iter().zip(&scaled.values) {
                prop_assert!((alpha * b - s).abs() < 1e-9 * (1.0 + s.abs()));
            }
            // Additivity: (w_b, 0) + (0, w_o) = (w_b, w_o).
            let part_b = combined_advantage(r, &teacher, &student, w_b, 0.0).unwrap();
            let part_o = combined_advantage(r, &teacher, &student, 0.0, w_o).unwrap();
            for ((b, o), full) in part_b.values.iter().zip(&part_o.values).zip(&base.values) {
                prop_assert!((b + o - full).abs() < 1e-12);
            }
        }

        #[test]
        fn prop_step_groups_are_mean_zero_and_scale_invariant(
            rows in prop::collection::vec(
                prop::collection::vec(-3.0f64..3.0, 1..6),
                2..8
            ),
            scale in 0.5f64..20.0,
        ) {
            let table = StepRewardTable::new(rows.clone());
            let adv = step_index_group_advantage(&table).unwrap();

            let max_len = rows.iter().map(|r| r.len()).max().unwrap();
            for t in 0..max_len {
                let members: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].len() > t).collect();
                if members.len() < 2 {
                    continue;
                }
                let mean_reward = members.iter().map(|&i| rows[i][t]).sum::<f64>() / members.len() as f64;
                let var = members.iter().map(|&i| (rows[i][t] - mean_reward).powi(2)).sum::<f64>() / members.len() as f64;
                if var.sqrt() == 0.0 {
                    for &i in &members {
                        prop_assert_eq!(adv[i][t], 0.0);
                    }
                    continue;
                }
                let mean_adv = members.iter().map(|&i| adv[i][t]).sum::<f64>() / members.len() as f64;
                prop_assert!(mean_adv.abs() < 1e-9, "group mean {mean_adv}");
            }

            // Positive rescaling by s changes each advantage by exactly
            // a · ε(1−s) / (s·std + ε), the ε-floor effect; assert that
            // closed-form bound. (With std ≥ 1 and s ≥ 1 it collapses below
            // 1e-6 relative, which is what the end-to-end checks use.)
            let scaled_rows: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().map(|x| x * scale).collect())
                .collect();
            let scaled_adv =
                step_index_group_advantage(&StepRewardTable::new(scaled_rows)).unwrap();
            for t in 0..max_len {
                let members: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].len() > t).collect();
                if members.len() < 2 {
                    continue;
                }
                let mean_reward = members.iter().map(|&i| rows[i][t]).sum::<f64>() / members.len() as f64;
                let std = (members.iter().map(|&i| (rows[i][t] - mean_reward).powi(2)).sum::<f64>()
                    / members.len() as f64)
                    .sqrt();
                for &i in &members {
                    let a = adv[i][t];
                    let b = scaled_adv[i][t];
                    let bound = a.abs() * STD_EPS * (1.0 - scale).abs() / (scale * std + STD_EPS);
                    prop_assert!(
                        (a - b).abs() <= bound * 1.0001 + 1e-12,
                        "{a} vs {b} at scale {scale}, std {std}"
                    );
                }
            }
        }

        #[test]
        fn prop_step_groups_translation_invariant(
            rows in prop::collection::vec(
                prop::collection::vec(-3.0f64..3.0, 1..6),
                2..8
            ),
            shift in -10.0f64..10.0,
        ) {
            let adv = step_index_group_advantage(&StepRewardTable::new(rows.clone())).unwrap();
            let shifted: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().map(|x| x + shift).collect())
                .collect();
            let shifted_adv =
                step_index_group_advantage(&StepRewardTable::new(shifted)).unwrap();
            for (a_row, b_row) in adv.iter().zip(&shifted_adv) {
                for (a, b) in a_row.iter().zip(b_row) {
                    prop_assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs().max(b.abs())));
                }
            }
        }
    }
}
