//! Bernoulli model of execution outcomes and Monte Carlo checks built on it.
//!
//! A generated solution is correct with probability `p_s` and a generated test
//! with probability `p_u`. A correct solution passes a test exactly when the
//! test is correct. An incorrect solution passes a correct test with
//! probability `p_01` and an incorrect test with probability `p_00`. All draws
//! are independent.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::{assign_group_rewards, RewardMode};
use crate::seed::{trial_rng, TrialRng};
use crate::types::{correctness_vector, ExecutionMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerativeProcess {
    pub p_s: f64,
    pub p_u: f64,
    pub p_00: f64,
    pub p_01: f64,
}

impl GenerativeProcess {
    pub fn new(p_s: f64, p_u: f64, p_00: f64, p_01: f64) -> Result<Self> {
        let process = Self { p_s, p_u, p_00, p_01 };
        process.validate()?;
        Ok(process)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_s", self.p_s), ("p_u", self.p_u), ("p_00", self.p_00), ("p_01", self.p_01)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }

    /// Expected per-test reward gap between a correct and an incorrect
    /// solution.
    pub fn mu(&self) -> f64 {
        mu(self)
    }

    /// Draws whether a solution of the given correctness passes a test of the
    /// given correctness.
    fn passes<R: Rng + ?Sized>(&self, solution_correct: bool, test_correct: bool, rng: &mut R) -> bool {
        match (solution_correct, test_correct) {
            (true, true) => true,
            (true, false) => false,
            (false, true) => rng.random_bool(self.p_01),
            (false, false) => rng.random_bool(self.p_00),
        }
    }
}

pub fn mu(process: &GenerativeProcess) -> f64 {
    process.p_u * (1.0 - process.p_01) - (1.0 - process.p_u) * process.p_00
}

/// `1 - exp(-mu^2 m / 8)`, clamped at zero. Meaningful as a bound only for
/// positive `mu`; returns 0 otherwise.
pub fn hoeffding_lower_bound(mu_val: f64, m: usize) -> f64 {
    if mu_val <= 0.0 {
        return 0.0;
    }
    (1.0 - (-mu_val * mu_val * m as f64 / 8.0).exp()).max(0.0)
}

/// Row sums of one correct and one incorrect solution against `m` freshly
/// drawn tests.
pub fn sample_pair_rewards<R: Rng + ?Sized>(process: &GenerativeProcess, m: usize, rng: &mut R) -> (u32, u32) {
    let mut correct = 0;
    let mut wrong = 0;
    for _ in 0..m {
        let test_correct = rng.random_bool(process.p_u);
        correct += process.passes(true, test_correct, rng) as u32;
        wrong += process.passes(false, test_correct, rng) as u32;
    }
    (correct, wrong)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionEstimate {
    pub m: usize,
    pub trials: usize,
    pub precision_hat: f64,
    pub std_error: f64,
    pub hoeffding_lower: f64,
}

/// Monte Carlo estimate of the probability that a correct solution strictly
/// outscores an incorrect one on `m` generated tests.
pub fn precision_mc(process: &GenerativeProcess, m: usize, trials: usize, seed: u64) -> Result<PrecisionEstimate> {
    process.validate()?;
    if trials == 0 || m == 0 {
        return Err(Error::InvalidArgument("m and trials must be >= 1".into()));
    }
    let wins: usize = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, &[m as u64, trial as u64]);
            let (c, w) = sample_pair_rewards(process, m, &mut rng);
            usize::from(c > w)
        })
        .sum();
    let p = wins as f64 / trials as f64;
    Ok(PrecisionEstimate {
        m,
        trials,
        precision_hat: p,
        std_error: (p * (1.0 - p) / trials as f64).sqrt(),
        hoeffding_lower: hoeffding_lower_bound(process.mu(), m),
    })
}

/// How the ground-truth columns of a sampled matrix are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundTruth {
    /// One column equal to the latent solution correctness.
    Oracle,
    /// `t_q` columns drawn as correct tests under the model.
    Sampled(usize),
}

/// A sampled execution matrix together with the latent correctness that
/// produced it.
#[derive(Debug, Clone)]
pub struct SampledMatrix {
    pub matrix: ExecutionMatrix,
    pub solution_correct: Vec<bool>,
    pub test_correct: Vec<bool>,
}

pub fn sample_matrix<R: Rng + ?Sized>(
    process: &GenerativeProcess,
    n: usize,
    m: usize,
    ground_truth: GroundTruth,
    rng: &mut R,
) -> Result<SampledMatrix> {
    let solution_correct: Vec<bool> = (0..n).map(|_| rng.random_bool(process.p_s)).collect();
    let test_correct: Vec<bool> = (0..m).map(|_| rng.random_bool(process.p_u)).collect();
    let t_q = match ground_truth {
        GroundTruth::Oracle => 1,
        GroundTruth::Sampled(t) => t,
    };
    let rows = solution_correct
        .iter()
        .map(|&sc| {
            let mut row: Vec<bool> = test_correct.iter().map(|&tc| process.passes(sc, tc, rng)).collect();
            match ground_truth {
                GroundTruth::Oracle => row.push(sc),
                GroundTruth::Sampled(t) => row.extend((0..t).map(|_| process.passes(sc, true, rng))),
            }
            row
        })
        .collect();
    Ok(SampledMatrix {
        matrix: ExecutionMatrix::new("synthetic", m, t_q, rows)?,
        solution_correct,
        test_correct,
    })
}

/// Plug-in estimates of the model parameters from a single test column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlugInEstimates {
    pub p_u: f64,
    pub p_01: f64,
    pub p_00: f64,
}

impl PlugInEstimates {
    pub fn mu(&self) -> f64 {
        self.p_u * (1.0 - self.p_01) - (1.0 - self.p_u) * self.p_00
    }
}

/// Estimates from one column: the test counts as accurate if every correct
/// solution passes it, and both conditional pass rates are the pass fraction
/// among incorrect solutions. `None` when no solution is incorrect.
pub fn plug_in_estimates(column: &[bool], correct: &[bool]) -> Option<PlugInEstimates> {
    let incorrect: Vec<bool> = column
        .iter()
        .zip(correct)
        .filter(|(_, &c)| !c)
        .map(|(&b, _)| b)
        .collect();
    if incorrect.is_empty() {
        return None;
    }
    let accurate = column.iter().zip(correct).filter(|(_, &c)| c).all(|(&b, _)| b);
    let fail_rate = incorrect.iter().filter(|&&b| !b).count() as f64 / incorrect.len() as f64;
    let pass_rate = incorrect.iter().filter(|&&b| b).count() as f64 / incorrect.len() as f64;
    Some(PlugInEstimates {
        p_u: if accurate { 1.0 } else { 0.0 },
        p_01: 1.0 - fail_rate,
        p_00: pass_rate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatorReport {
    pub n: usize,
    pub m: usize,
    pub trials: usize,
    /// Trials without any incorrect solution; excluded from the averages.
    pub skipped_trials: usize,
    pub mu: f64,
    pub mean_mu_hat: f64,
    pub abs_error_of_mean: f64,
    pub mean_abs_error: f64,
    /// Largest deviation between reward / num_incorrect and the plug-in mu.
    pub max_identity_error: f64,
}

/// Samples `trials` matrices with known latent correctness and compares the
/// per-column plug-in estimate of mu with its true value.
pub fn estimator_check(process: &GenerativeProcess, n: usize, m: usize, trials: usize, seed: u64) -> Result<EstimatorReport> {
    process.validate()?;
    if n < 2 || m == 0 || trials == 0 {
        return Err(Error::InvalidArgument("estimator check needs n >= 2, m >= 1, trials >= 1".into()));
    }
    let true_mu = process.mu();

    struct TrialStats {
        sum_hat: f64,
        sum_abs: f64,
        columns: usize,
        max_identity: f64,
    }

    let per_trial = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<Option<TrialStats>> {
            let mut rng = trial_rng(seed, &[n as u64, m as u64, trial as u64]);
            let sample = sample_matrix(process, n, m, GroundTruth::Oracle, &mut rng)?;
            let incorrect = sample.solution_correct.iter().filter(|&&c| !c).count();
            if incorrect == 0 {
                return Ok(None);
            }
            let (_, tests) = assign_group_rewards(&sample.matrix, RewardMode::Theoretical, false, None)?;
            let mut stats = TrialStats {
                sum_hat: 0.0,
                sum_abs: 0.0,
                columns: m,
                max_identity: 0.0,
            };
            for k in 0..m {
                let column: Vec<bool> = sample.matrix.column(k).collect();
                let est = plug_in_estimates(&column, &sample.solution_correct).expect("incorrect rows exist");
                let mu_hat = est.mu();
                stats.sum_hat += mu_hat;
                stats.sum_abs += (mu_hat - true_mu).abs();
                let ratio = tests.rewards[k] / incorrect as f64;
                stats.max_identity = stats.max_identity.max((ratio - mu_hat).abs());
            }
            Ok(Some(stats))
        })
        .collect::<Result<Vec<_>>>()?;

    let skipped_trials = per_trial.iter().filter(|t| t.is_none()).count();
    let used: Vec<TrialStats> = per_trial.into_iter().flatten().collect();
    let columns: usize = used.iter().map(|t| t.columns).sum();
    let (mean_mu_hat, mean_abs_error) = if columns == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (
            used.iter().map(|t| t.sum_hat).sum::<f64>() / columns as f64,
            used.iter().map(|t| t.sum_abs).sum::<f64>() / columns as f64,
        )
    };
    Ok(EstimatorReport {
        n,
        m,
        trials,
        skipped_trials,
        mu: true_mu,
        mean_mu_hat,
        abs_error_of_mean: (mean_mu_hat - true_mu).abs(),
        mean_abs_error,
        max_identity_error: used.iter().map(|t| t.max_identity).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub p_u_effective: f64,
    pub p_s_effective: f64,
    /// Mean over tests of reward / number of incorrect solutions, i.e. the
    /// per-test estimate of mu. NaN when the group has no incorrect solution.
    pub mean_test_reward: f64,
    pub mean_code_reward: f64,
    /// Mean unscaled test reward; shrinks to 0 as the code side saturates.
    pub mean_raw_test_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CoevolutionTrace {
    pub records: Vec<TraceRecord>,
}

impl CoevolutionTrace {
    pub fn p_u_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.p_u_effective).collect()
    }

    pub fn p_s_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.p_s_effective).collect()
    }

    pub fn mean_test_reward_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_test_reward).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,p_u_effective,p_s_effective,mean_test_reward,mean_code_reward,mean_raw_test_reward\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.step,
                r.p_u_effective,
                r.p_s_effective,
                r.mean_test_reward,
                r.mean_code_reward,
                r.mean_raw_test_reward
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoevolutionConfig {
    pub steps: usize,
    pub n: usize,
    pub m: usize,
    /// Ground-truth tests per sampled task.
    pub t_q: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

const LOGIT_LIMIT: f64 = 30.0;

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean advantage of latent-correct members minus that of latent-incorrect
/// members; zero if either side is empty.
fn advantage_gap(advantages: &[f64], latent: &[bool]) -> f64 {
    let mean_of = |want: bool| {
        let vals: Vec<f64> = advantages
            .iter()
            .zip(latent)
            .filter(|(_, &l)| l == want)
            .map(|(&a, _)| a)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    match (mean_of(true), mean_of(false)) {
        (Some(c), Some(i)) => c - i,
        _ => 0.0,
    }
}

/// Synthetic stand-in for the policy update: each step samples a task from
/// the current model, computes rewards and advantages, then moves the logits
/// of `p_u` and `p_s` by `learning_rate` times the advantage gap between
/// latent-correct and latent-incorrect candidates. `p_00` and `p_01` stay
/// fixed.
pub fn coevolve_sim(initial: &GenerativeProcess, config: &CoevolutionConfig) -> Result<CoevolutionTrace> {
    initial.validate()?;
    if config.steps == 0 || config.n == 0 || config.m == 0 || config.t_q == 0 {
        return Err(Error::InvalidArgument("steps, n, m and t_q must all be >= 1".into()));
    }
    let mut process = *initial;
    let mut trace = CoevolutionTrace::default();
    for step in 0..config.steps {
        let mut rng: TrialRng = trial_rng(config.seed, &[step as u64]);
        let sample = sample_matrix(&process, config.n, config.m, GroundTruth::Sampled(config.t_q), &mut rng)?;
        let (codes, tests) = assign_group_rewards(&sample.matrix, RewardMode::Theoretical, false, None)?;
        let incorrect = correctness_vector(&sample.matrix)?.num_incorrect();
        let raw = mean(&tests.rewards);

        trace.records.push(TraceRecord {
            step,
            p_u_effective: process.p_u,
            p_s_effective: process.p_s,
            mean_test_reward: if incorrect == 0 { f64::NAN } else { raw / incorrect as f64 },
            mean_code_reward: mean(&codes.rewards),
            mean_raw_test_reward: raw,
        });

        let test_gap = advantage_gap(&tests.advantages, &sample.test_correct);
        let code_gap = advantage_gap(&codes.advantages, &sample.solution_correct);
        process.p_u = sigmoid((logit(process.p_u) + config.learning_rate * test_gap).clamp(-LOGIT_LIMIT, LOGIT_LIMIT));
        process.p_s = sigmoid((logit(process.p_s) + config.learning_rate * code_gap).clamp(-LOGIT_LIMIT, LOGIT_LIMIT));
        if config.learning_rate == 0.0 {
            // Avoid round-off drift through logit/sigmoid.
            process.p_u = initial.p_u;
            process.p_s = initial.p_s;
        }
    }
    Ok(trace)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Ordinary least-squares slope of `values` against their index. Non-finite
/// values are left out; fewer than two points give 0.
pub fn ls_slope(values: &[f64]) -> f64 {
    let points: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, y)| y.is_finite())
        .map(|(i, &y)| (i as f64, y))
        .collect();
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let x_mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (num, den) = points.iter().fold((0.0, 0.0), |(num, den), &(x, y)| {
        let dx = x - x_mean;
        (num + dx * (y - y_mean), den + dx * dx)
    });
    num / den
}

pub fn precision_csv(rows: &[PrecisionEstimate]) -> String {
    let mut out = String::from("m,precision_hat,std_error,hoeffding_lower\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.m, r.precision_hat, r.std_error, r.hoeffding_lower
        ));
    }
    out
}

pub fn estimator_csv(rows: &[EstimatorReport]) -> String {
    let mut out = String::from(
        "n,m,trials,skipped_trials,mu,mean_mu_hat,abs_error_of_mean,mean_abs_error,max_identity_error\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3e}\n",
            r.n,
            r.m,
            r.trials,
            r.skipped_trials,
            r.mu,
            r.mean_mu_hat,
            r.abs_error_of_mean,
            r.mean_abs_error,
            r.max_identity_error
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn process(p_u: f64, p_01: f64, p_00: f64) -> GenerativeProcess {
        GenerativeProcess::new(0.5, p_u, p_00, p_01).unwrap()
    }

    #[test]
    fn mu_cases() {
        assert!((process(0.8, 0.25, 0.5).mu() - 0.5).abs() < 1e-12);
        assert!(process(1.0 / 3.0, 0.25, 0.375).mu().abs() < 1e-12);
        assert!((process(0.2, 0.5, 0.8).mu() + 0.54).abs() < 1e-12);
    }

    #[test]
    fn hoeffding_cases() {
        assert!((hoeffding_lower_bound(0.5, 64) - (1.0 - (-2.0f64).exp())).abs() < 1e-12);
        assert!((hoeffding_lower_bound(0.5, 64) - 0.864665).abs() < 1e-6);
        assert_eq!(hoeffding_lower_bound(0.0, 1000), 0.0);
        assert!((hoeffding_lower_bound(0.5, 100) - 0.956063).abs() < 1e-6);
        assert_eq!(hoeffding_lower_bound(-0.3, 1000), 0.0);
    }

    #[test]
    fn invalid_process_rejected() {
        assert!(GenerativeProcess::new(1.2, 0.5, 0.5, 0.5).is_err());
        assert!(GenerativeProcess::new(0.5, -0.1, 0.5, 0.5).is_err());
    }

    #[test]
    fn pair_rewards_corners() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let perfect = process(1.0, 0.0, 0.7);
        for _ in 0..50 {
            assert_eq!(sample_pair_rewards(&perfect, 9, &mut rng), (9, 0));
        }
        let hopeless = process(0.0, 0.4, 0.4);
        for _ in 0..50 {
            assert_eq!(sample_pair_rewards(&hopeless, 9, &mut rng).0, 0);
        }
    }

    #[test]
    fn precision_is_reproducible() {
        let p = process(0.8, 0.25, 0.5);
        assert_eq!(precision_mc(&p, 16, 500, 9).unwrap(), precision_mc(&p, 16, 500, 9).unwrap());
        assert_ne!(
            precision_mc(&p, 16, 500, 9).unwrap().precision_hat,
            precision_mc(&p, 16, 500, 10).unwrap().precision_hat
        );
    }

    #[test]
    fn sampled_matrix_respects_fixed_pass_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = GenerativeProcess::new(0.5, 0.5, 0.3, 0.6).unwrap();
        let s = sample_matrix(&p, 20, 20, GroundTruth::Sampled(2), &mut rng).unwrap();
        for (j, &sc) in s.solution_correct.iter().enumerate() {
            for (k, &tc) in s.test_correct.iter().enumerate() {
                if sc {
                    assert_eq!(s.matrix.get(j, k), tc);
                }
            }
            if sc {
                assert!(s.matrix.ground_truth_cells(j).iter().all(|&b| b));
            }
        }
    }

    #[test]
    fn oracle_ground_truth_column_matches_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = GenerativeProcess::new(0.4, 0.5, 0.9, 0.9).unwrap();
        let s = sample_matrix(&p, 10, 3, GroundTruth::Oracle, &mut rng).unwrap();
        let flags = crate::types::correctness_vector(&s.matrix).unwrap().flags;
        assert_eq!(flags, s.solution_correct);
    }

    #[test]
    fn plug_in_corner() {
        // Perfect tests: every incorrect solution fails.
        let est = plug_in_estimates(&[true, false, false], &[true, false, false]).unwrap();
        assert_eq!(est.mu(), 1.0);
        assert!(plug_in_estimates(&[true, true], &[true, true]).is_none());
    }

    #[test]
    fn estimator_counts_degenerate_trials() {
        let all_correct = GenerativeProcess::new(1.0, 0.5, 0.5, 0.5).unwrap();
        let r = estimator_check(&all_correct, 4, 3, 7, 1).unwrap();
        assert_eq!(r.skipped_trials, 7);
        assert!(r.mean_mu_hat.is_nan());
    }

    #[test]
    fn estimator_exact_for_perfect_tests() {
        let p = GenerativeProcess::new(0.5, 1.0, 0.3, 0.0).unwrap();
        let r = estimator_check(&p, 6, 4, 50, 2).unwrap();
        assert_eq!(r.mean_mu_hat, 1.0);
        assert_eq!(r.mean_abs_error, 0.0);
        assert_eq!(r.max_identity_error, 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_probabilities() {
        let p = GenerativeProcess::new(0.4, 0.4, 0.5, 0.3).unwrap();
        let cfg = CoevolutionConfig {
            steps: 20,
            n: 8,
            m: 8,
            t_q: 3,
            learning_rate: 0.0,
            seed: 4,
        };
        let trace = coevolve_sim(&p, &cfg).unwrap();
        assert_eq!(trace.records.len(), 20);
        assert!(trace.records.iter().all(|r| r.p_u_effective == 0.4 && r.p_s_effective == 0.4));
        assert!(trace.records.windows(2).all(|w| w[0].step < w[1].step));
        for r in &trace.records {
            assert!(r.mean_test_reward.is_nan() || r.mean_test_reward.signum() == r.mean_raw_test_reward.signum() || r.mean_raw_test_reward == 0.0);
        }
    }

    #[test]
    fn slope_of_line() {
        assert!((ls_slope(&[1.0, 3.0, 5.0, 7.0]) - 2.0).abs() < 1e-12);
        assert_eq!(ls_slope(&[4.0]), 0.0);
        assert!(ls_slope(&[3.0, 2.0, 1.0]) < 0.0);
        assert!((ls_slope(&[1.0, f64::NAN, 5.0, 7.0]) - 2.0).abs() < 1e-12);
        assert_eq!(ls_slope(&[f64::NAN, 1.0]), 0.0);
    }
}
