//! Training-time rewards derived from the execution matrix.
//!
//! Code candidates are rewarded by the number of ground-truth tests they pass.
//! Generated tests are rewarded by a plug-in estimate of how well they
//! separate correct from incorrect solutions: a test that passes every correct
//! solution earns one point per incorrect solution, and loses one point for
//! every incorrect solution that passes it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{correctness_vector, CandidateKind, CorrectnessVector, ExecutionMatrix};

/// Standard deviations below this are treated as zero.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Separation estimate; the pass-all factor ranges over correct rows only.
    #[default]
    Theoretical,
    /// 1 iff the test passes every correct solution.
    Simple,
    /// Separation estimate with the pass-all factor taken over every row, so
    /// it vanishes whenever an incorrect solution exists. Kept for comparison.
    Literal,
}

impl std::str::FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theoretical" => Ok(Self::Theoretical),
            "simple" => Ok(Self::Simple),
            "literal" => Ok(Self::Literal),
            other => Err(Error::InvalidArgument(format!(
                "unknown reward mode {other:?} (expected theoretical, simple or literal)"
            ))),
        }
    }
}

/// Per-candidate rewards and normalized advantages for one task group.
///
/// `rewards` are the raw rewards. When the length transform is applied, the
/// advantages are computed from the transformed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSet {
    pub task_id: String,
    pub kind: CandidateKind,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub transform_applied: bool,
}

/// Counts describing one generated-test column against the correctness vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnStats {
    pub num_correct: usize,
    pub num_incorrect: usize,
    /// Incorrect rows that pass the test.
    pub incorrect_passes: usize,
    /// Every correct row passes the test (vacuously true with no correct rows).
    pub passes_all_correct: bool,
    /// Every row is correct and passes the test.
    pub passes_all_rows_literal: bool,
}

impl ColumnStats {
    pub fn compute(matrix: &ExecutionMatrix, correct: &CorrectnessVector, k: usize) -> Result<Self> {
        matrix.check_generated_column(k)?;
        let mut stats = ColumnStats {
            num_correct: 0,
            num_incorrect: 0,
            incorrect_passes: 0,
            passes_all_correct: true,
            passes_all_rows_literal: true,
        };
        for (pass, &is_correct) in matrix.column(k).zip(&correct.flags) {
            if is_correct {
                stats.num_correct += 1;
                stats.passes_all_correct &= pass;
            } else {
                stats.num_incorrect += 1;
                stats.incorrect_passes += pass as usize;
            }
            stats.passes_all_rows_literal &= is_correct && pass;
        }
        Ok(stats)
    }

    pub fn separation_reward(&self) -> i64 {
        -(self.incorrect_passes as i64) + (self.passes_all_correct as i64) * self.num_incorrect as i64
    }

    pub fn literal_reward(&self) -> i64 {
        -(self.incorrect_passes as i64) + (self.passes_all_rows_literal as i64) * self.num_incorrect as i64
    }
}

/// Number of ground-truth tests passed by row `j`.
pub fn code_reward(matrix: &ExecutionMatrix, j: usize) -> Result<u32> {
    if matrix.t_q() == 0 {
        return Err(Error::GroundTruthMissing(matrix.task_id().to_string()));
    }
    matrix.check_row(j)?;
    Ok(matrix.ground_truth_cells(j).iter().filter(|&&b| b).count() as u32)
}

pub fn unit_test_reward(matrix: &ExecutionMatrix, k: usize) -> Result<i64> {
    let correct = correctness_vector(matrix)?;
    Ok(ColumnStats::compute(matrix, &correct, k)?.separation_reward())
}

pub fn unit_test_reward_literal(matrix: &ExecutionMatrix, k: usize) -> Result<i64> {
    let correct = correctness_vector(matrix)?;
    Ok(ColumnStats::compute(matrix, &correct, k)?.literal_reward())
}

pub fn unit_test_reward_simple(matrix: &ExecutionMatrix, k: usize) -> Result<bool> {
    let correct = correctness_vector(matrix)?;
    Ok(ColumnStats::compute(matrix, &correct, k)?.passes_all_correct)
}

/// Z-scores a reward group with the population standard deviation. A group
/// with (numerically) zero spread maps to all zeros.
pub fn normalize_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let (mean, std) = mean_std(rewards);
    if std < STD_FLOOR {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Intermediate values of the length transform, exposed for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthTransform {
    /// Rewards minus their mean.
    pub centered: Vec<f64>,
    /// Length-shaped rewards; empty if the transform short-circuited.
    pub shaped: Vec<f64>,
    /// Median length over positively rewarded responses.
    pub threshold: Option<f64>,
    /// Longest positively rewarded response.
    pub max_positive_length: Option<u64>,
    /// Scale applied to positive shaped rewards; `None` in the fallback branch.
    pub alpha: Option<f64>,
    pub sigma: Option<f64>,
    pub output: Vec<f64>,
}

/// Length-guided reward transform for long reasoning responses.
///
/// Among responses with above-average reward, shorter ones are preferred:
/// each gets `threshold - length`, where the threshold is the median length of
/// that set. Every other response gets `threshold - longest_positive_length`.
/// Positive shaped values are then rescaled so that the positive and negative
/// mass balance, and the whole group is divided by its standard deviation.
pub fn length_transform(rewards: &[f64], lengths: &[u64]) -> Result<Vec<f64>> {
    Ok(length_transform_detailed(rewards, lengths)?.output)
}

pub fn length_transform_detailed(rewards: &[f64], lengths: &[u64]) -> Result<LengthTransform> {
    if rewards.len() != lengths.len() {
        return Err(Error::Shape(format!(
            "{} rewards but {} lengths",
            rewards.len(),
            lengths.len()
        )));
    }
    let mut detail = LengthTransform {
        centered: Vec::new(),
        shaped: Vec::new(),
        threshold: None,
        max_positive_length: None,
        alpha: None,
        sigma: None,
        output: Vec::new(),
    };
    if rewards.is_empty() {
        return Ok(detail);
    }

    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    detail.centered = rewards.iter().map(|r| r - mean).collect();

    let positive_lengths: Vec<u64> = detail
        .centered
        .iter()
        .zip(lengths)
        .filter(|(r, _)| **r > 0.0)
        .map(|(_, &l)| l)
        .collect();
    if positive_lengths.is_empty() || positive_lengths.len() == rewards.len() {
        detail.output = detail.centered.clone();
        return Ok(detail);
    }

    let threshold = median(&positive_lengths);
    let l_max = *positive_lengths.iter().max().expect("non-empty");
    detail.threshold = Some(threshold);
    detail.max_positive_length = Some(l_max);

    detail.shaped = detail
        .centered
        .iter()
        .zip(lengths)
        .map(|(&r, &l)| {
            if r > 0.0 {
                threshold - l as f64
            } else {
                threshold - l_max as f64
            }
        })
        .collect();

    let positive_mass: f64 = detail.shaped.iter().filter(|v| **v > 0.0).sum();
    let negative_mass: f64 = detail.shaped.iter().filter(|v| **v < 0.0).map(|v| -v).sum();

    let scaled: Vec<f64> = if positive_mass == 0.0 {
        detail.shaped.clone()
    } else {
        let alpha = negative_mass / positive_mass;
        detail.alpha = Some(alpha);
        detail
            .shaped
            .iter()
            .map(|&v| if v > 0.0 { alpha * v } else { v })
            .collect()
    };

    let (_, sigma) = mean_std(&scaled);
    detail.sigma = Some(sigma);
    detail.output = if sigma < STD_FLOOR {
        vec![0.0; scaled.len()]
    } else {
        scaled.iter().map(|v| v / sigma).collect()
    };
    Ok(detail)
}

/// Median; for an even count, the mean of the two middle values.
fn median(values: &[u64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid] as f64
    } else {
        (sorted[mid - 1] as f64 + sorted[mid] as f64) / 2.0
    }
}

/// Probability ratio and advantage of one response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSample {
    ratio: f64,
    advantage: f64,
}

impl ObjectiveSample {
    pub fn new(ratio: f64, advantage: f64) -> Result<Self> {
        if !(ratio.is_finite() && ratio > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "policy ratio must be finite and positive, got {ratio}"
            )));
        }
        if !advantage.is_finite() {
            return Err(Error::InvalidArgument(format!("advantage must be finite, got {advantage}")));
        }
        Ok(Self { ratio, advantage })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn advantage(&self) -> f64 {
        self.advantage
    }

    /// Pessimistic clipped surrogate term for this response.
    pub fn clipped_term(&self, epsilon: f64) -> f64 {
        let clipped = self.ratio.max(1.0 - epsilon).min(1.0 + epsilon);
        (self.ratio * self.advantage).min(clipped * self.advantage)
    }
}

/// Value of the clipped group-relative surrogate objective with a KL penalty.
pub fn grpo_objective(samples: &[ObjectiveSample], epsilon: f64, kl_estimate: f64, beta: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyGroup);
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(kl_estimate >= 0.0 && beta >= 0.0) {
        return Err(Error::InvalidArgument("kl_estimate and beta must be non-negative".into()));
    }
    let surrogate = samples.iter().map(|s| s.clipped_term(epsilon)).sum::<f64>() / samples.len() as f64;
    Ok(surrogate - beta * kl_estimate)
}

/// Reward for a test candidate that failed to parse: below any reachable
/// valid reward.
pub fn invalid_test_reward(n: usize) -> f64 {
    -((n + 1) as f64)
}

/// Reward for a code candidate that failed to parse.
pub const INVALID_CODE_REWARD: f64 = 0.0;

/// Rewards and advantages for the code group and the test group of one task.
///
/// Both sets are aligned to candidate indices and include candidates that
/// failed to parse. `test_lengths`, when given, must cover every test
/// candidate; it is required when `long_cot` is set.
pub fn assign_group_rewards(
    matrix: &ExecutionMatrix,
    mode: RewardMode,
    long_cot: bool,
    test_lengths: Option<&[u64]>,
) -> Result<(RewardSet, RewardSet)> {
    let correct = correctness_vector(matrix)?;

    let mut code_rewards = vec![INVALID_CODE_REWARD; matrix.code_total()];
    for (j, &idx) in matrix.code_indices().iter().enumerate() {
        code_rewards[idx] = f64::from(code_reward(matrix, j)?);
    }

    let mut test_rewards = vec![invalid_test_reward(matrix.n()); matrix.test_total()];
    for (k, &idx) in matrix.test_indices().iter().enumerate() {
        let stats = ColumnStats::compute(matrix, &correct, k)?;
        test_rewards[idx] = match mode {
            RewardMode::Theoretical => stats.separation_reward() as f64,
            RewardMode::Simple => stats.passes_all_correct as u8 as f64,
            RewardMode::Literal => stats.literal_reward() as f64,
        };
    }

    let shaped_tests = if long_cot {
        let lengths = test_lengths.ok_or_else(|| {
            Error::InvalidArgument("long-CoT transform needs response lengths for every test".into())
        })?;
        if lengths.len() != test_rewards.len() {
            return Err(Error::Shape(format!(
                "task {}: {} test lengths for {} test candidates",
                matrix.task_id(),
                lengths.len(),
                test_rewards.len()
            )));
        }
        length_transform(&test_rewards, lengths)?
    } else {
        test_rewards.clone()
    };

    let code_set = RewardSet {
        task_id: matrix.task_id().to_string(),
        kind: CandidateKind::Code,
        advantages: advantages_or_empty(&code_rewards)?,
        rewards: code_rewards,
        transform_applied: false,
    };
    let test_set = RewardSet {
        task_id: matrix.task_id().to_string(),
        kind: CandidateKind::Test,
        advantages: advantages_or_empty(&shaped_tests)?,
        rewards: test_rewards,
        transform_applied: long_cot,
    };
    Ok((code_set, test_set))
}

fn advantages_or_empty(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        Ok(Vec::new())
    } else {
        normalize_advantages(rewards)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column_matrix(correct: &[bool], column: &[bool]) -> ExecutionMatrix {
        let rows = correct
            .iter()
            .zip(column)
            .map(|(&c, &b)| vec![b, c])
            .collect();
        ExecutionMatrix::new("t", 1, 1, rows).unwrap()
    }

    #[test]
    fn code_reward_cases() {
        let m = ExecutionMatrix::new(
            "t",
            1,
            3,
            vec![
                vec![false, true, true, false],
                vec![true, false, false, false],
                vec![false, true, true, true],
            ],
        )
        .unwrap();
        assert_eq!(code_reward(&m, 0).unwrap(), 2);
        assert_eq!(code_reward(&m, 1).unwrap(), 0);
        assert_eq!(code_reward(&m, 2).unwrap(), 3);
        assert!(code_reward(&m, 3).is_err());
        let no_gt = ExecutionMatrix::new("t", 1, 0, vec![vec![true]]).unwrap();
        assert!(matches!(code_reward(&no_gt, 0), Err(Error::GroundTruthMissing(_))));
    }

    #[test]
    fn unit_test_reward_cases() {
        let correct = [true, true, false, false];
        assert_eq!(unit_test_reward(&column_matrix(&correct, &[true, true, false, false]), 0).unwrap(), 2);
        assert_eq!(unit_test_reward(&column_matrix(&correct, &[false, true, true, true]), 0).unwrap(), -2);
        assert_eq!(unit_test_reward(&column_matrix(&correct, &[true, true, true, true]), 0).unwrap(), 0);
    }

    #[test]
    fn literal_product_vanishes_with_incorrect_rows() {
        let correct = [true, true, false, false];
        let m = column_matrix(&correct, &[true, true, false, false]);
        assert_eq!(unit_test_reward_literal(&m, 0).unwrap(), 0);
        let all_correct = column_matrix(&[true, true], &[true, true]);
        assert_eq!(unit_test_reward_literal(&all_correct, 0).unwrap(), 0);
    }

    #[test]
    fn simple_reward_cases() {
        assert!(unit_test_reward_simple(&column_matrix(&[true, false], &[true, true]), 0).unwrap());
        assert!(!unit_test_reward_simple(&column_matrix(&[true, false], &[false, true]), 0).unwrap());
        for col in [[false, false], [true, false], [true, true]] {
            assert!(unit_test_reward_simple(&column_matrix(&[false, false], &col), 0).unwrap());
        }
    }

    #[test]
    fn unit_test_reward_rejects_bad_column() {
        let m = column_matrix(&[true], &[true]);
        assert!(matches!(unit_test_reward(&m, 1), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn normalize_cases() {
        let a = normalize_advantages(&[1.0, 2.0, 3.0]).unwrap();
        let expected = [-1.224745, 0.0, 1.224745];
        for (x, y) in a.iter().zip(expected) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
        assert_eq!(normalize_advantages(&[5.0, 5.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(normalize_advantages(&[0.0, 4.0]).unwrap(), vec![-1.0, 1.0]);
        assert!(matches!(normalize_advantages(&[]), Err(Error::EmptyGroup)));
    }

    #[test]
    fn length_transform_worked_example() {
        let d = length_transform_detailed(&[1.0, 2.0, -1.0], &[100, 300, 500]).unwrap();
        assert_eq!(d.threshold, Some(200.0));
        assert_eq!(d.max_positive_length, Some(300));
        assert_eq!(d.shaped, vec![100.0, -100.0, -100.0]);
        assert_eq!(d.alpha, Some(2.0));
        assert!((d.sigma.unwrap() - 20000f64.sqrt()).abs() < 1e-9);
        let expected = [std::f64::consts::SQRT_2, -std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2];
        for (x, y) in d.output.iter().zip(expected) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn length_transform_equal_rewards_unchanged() {
        assert_eq!(length_transform(&[3.0, 3.0, 3.0], &[1, 2, 3]).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn length_transform_forced_zero_fallback() {
        let d = length_transform_detailed(&[1.0, 1.0, -2.0], &[40, 40, 10]).unwrap();
        assert_eq!(d.shaped, vec![0.0, 0.0, 0.0]);
        assert_eq!(d.alpha, None);
        assert_eq!(d.output, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn length_transform_fallback_divides_by_spread() {
        // Positives tie at the threshold; the long positive response is pushed negative.
        let d = length_transform_detailed(&[1.0, 1.0, 1.0, -3.0], &[10, 10, 30, 5]).unwrap();
        assert_eq!(d.threshold, Some(10.0));
        assert_eq!(d.shaped, vec![0.0, 0.0, -20.0, -20.0]);
        assert_eq!(d.alpha, None);
        assert!((d.sigma.unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(d.output, vec![0.0, 0.0, -2.0, -2.0]);
    }

    #[test]
    fn length_transform_even_median() {
        let d = length_transform_detailed(&[1.0, 1.0, 1.0, 1.0, -4.0], &[10, 20, 30, 50, 0]).unwrap();
        assert_eq!(d.threshold, Some(25.0));
    }

    #[test]
    fn length_transform_shape_error() {
        assert!(matches!(length_transform(&[1.0], &[1, 2]), Err(Error::Shape(_))));
    }

    #[test]
    fn objective_hand_cases() {
        let one = |r, a| grpo_objective(&[ObjectiveSample::new(r, a).unwrap()], 0.2, 0.0, 0.01).unwrap();
        assert_eq!(one(1.0, 2.0), 2.0);
        assert_eq!(one(2.0, 1.0), 1.2);
        assert_eq!(one(0.5, -1.0), -0.8);
    }

    #[test]
    fn objective_kl_penalty_and_mean() {
        let s = [ObjectiveSample::new(1.0, 1.0).unwrap(), ObjectiveSample::new(1.0, 3.0).unwrap()];
        let v = grpo_objective(&s, 0.2, 0.5, 0.1).unwrap();
        assert!((v - (2.0 - 0.05)).abs() < 1e-12);
        assert!(matches!(grpo_objective(&[], 0.2, 0.0, 0.0), Err(Error::EmptyGroup)));
        assert!(grpo_objective(&s, 1.0, 0.0, 0.0).is_err());
        assert!(ObjectiveSample::new(0.0, 1.0).is_err());
        assert!(ObjectiveSample::new(f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn objective_piecewise_on_ratio_grid() {
        let eps = 0.2;
        for i in 1..=300 {
            let ratio = i as f64 * 0.01;
            let pos = ObjectiveSample::new(ratio, 1.5).unwrap().clipped_term(eps);
            let expected_pos = if ratio >= 1.0 + eps { (1.0 + eps) * 1.5 } else { ratio * 1.5 };
            assert!((pos - expected_pos).abs() < 1e-12, "A>0 ratio {ratio}");

            let neg = ObjectiveSample::new(ratio, -1.5).unwrap().clipped_term(eps);
            let expected_neg = if ratio <= 1.0 - eps { (1.0 - eps) * -1.5 } else { ratio * -1.5 };
            assert!((neg - expected_neg).abs() < 1e-12, "A<0 ratio {ratio}");
        }
    }

    #[test]
    fn assign_all_correct_gives_zero_test_rewards() {
        let m = ExecutionMatrix::new(
            "t",
            2,
            1,
            vec![vec![true, false, true], vec![false, true, true]],
        )
        .unwrap();
        let (codes, tests) = assign_group_rewards(&m, RewardMode::Theoretical, false, None).unwrap();
        assert_eq!(tests.rewards, vec![0.0, 0.0]);
        assert_eq!(tests.advantages, vec![0.0, 0.0]);
        assert_eq!(codes.rewards, vec![1.0, 1.0]);
        assert!(!tests.transform_applied);
    }

    #[test]
    fn assign_invalid_test_gets_sentinel() {
        // Three test candidates; index 1 failed to parse. n = 2.
        let m = ExecutionMatrix::new(
            "t",
            2,
            1,
            vec![vec![true, false, true], vec![false, false, false]],
        )
        .unwrap()
        .with_candidates(vec![0, 1], 2, vec![0, 2], 3)
        .unwrap();
        let (_, tests) = assign_group_rewards(&m, RewardMode::Theoretical, false, None).unwrap();
        assert_eq!(tests.rewards, vec![1.0, -3.0, 0.0]);
        assert!(tests.rewards[1] < -(m.n() as f64));
    }

    #[test]
    fn assign_invalid_code_gets_zero() {
        let m = ExecutionMatrix::new("t", 0, 1, vec![vec![true]])
            .unwrap()
            .with_candidates(vec![1], 2, vec![], 0)
            .unwrap();
        let (codes, tests) = assign_group_rewards(&m, RewardMode::Simple, false, None).unwrap();
        assert_eq!(codes.rewards, vec![0.0, 1.0]);
        assert_eq!(codes.advantages, vec![-1.0, 1.0]);
        assert!(tests.rewards.is_empty());
    }

    #[test]
    fn assign_long_cot_requires_lengths() {
        let m = column_matrix(&[true, false], &[true, false]);
        assert!(assign_group_rewards(&m, RewardMode::Theoretical, true, None).is_err());
        let (_, tests) = assign_group_rewards(&m, RewardMode::Theoretical, true, Some(&[12])).unwrap();
        assert!(tests.transform_applied);
        assert!(assign_group_rewards(&m, RewardMode::Theoretical, true, Some(&[1, 2])).is_err());
    }

    #[test]
    fn reward_mode_parsing() {
        assert_eq!("simple".parse::<RewardMode>().unwrap(), RewardMode::Simple);
        assert!("fancy".parse::<RewardMode>().is_err());
    }
}
