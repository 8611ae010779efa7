use coevo_core::bon::{code_accuracy, grid_eval, select_best};
use coevo_core::reward::{
    code_reward, length_transform_detailed, normalize_advantages, unit_test_reward, unit_test_reward_literal,
    unit_test_reward_simple,
};
use coevo_core::{correctness_vector, ExecutionMatrix};
use num_rational::Ratio;
use proptest::prelude::*;

/// Random matrix with at least one generated column and one ground-truth column.
fn matrix_strategy(max_n: usize, max_m: usize) -> impl Strategy<Value = ExecutionMatrix> {
    (1..=max_n, 1..=max_m, 1..=3usize).prop_flat_map(|(n, m, t_q)| {
        proptest::collection::vec(proptest::collection::vec(any::<bool>(), m + t_q), n)
            .prop_map(move |rows| ExecutionMatrix::new("p", m, t_q, rows).unwrap())
    })
}

fn column(matrix: &ExecutionMatrix, k: usize) -> Vec<bool> {
    matrix.column(k).collect()
}

proptest! {
    #[test]
    fn test_reward_sign_and_bound(matrix in matrix_strategy(16, 8)) {
        let correct = correctness_vector(&matrix).unwrap().flags;
        let incorrect = correct.iter().filter(|&&c| !c).count() as i64;
        for k in 0..matrix.m() {
            let col = column(&matrix, k);
            let r = unit_test_reward(&matrix, k).unwrap();
            let passes_all_correct = col.iter().zip(&correct).all(|(&b, &c)| !c || b);
            let fails_incorrect = col.iter().zip(&correct).any(|(&b, &c)| !c && !b);
            let passes_incorrect = col.iter().zip(&correct).any(|(&b, &c)| !c && b);
            prop_assert!(r.abs() <= incorrect);
            prop_assert_eq!(r > 0, passes_all_correct && fails_incorrect);
            prop_assert_eq!(r < 0, !passes_all_correct && passes_incorrect);
            prop_assert_eq!(unit_test_reward_simple(&matrix, k).unwrap(), passes_all_correct);
            // The all-rows product only differs once an incorrect row exists.
            let literal = unit_test_reward_literal(&matrix, k).unwrap();
            prop_assert!(literal <= r);
            if incorrect == 0 {
                prop_assert_eq!(literal, r);
            }
        }
    }

    #[test]
    fn reward_over_incorrect_count_is_the_plug_in_mu(matrix in matrix_strategy(16, 8)) {
        let correct = correctness_vector(&matrix).unwrap().flags;
        let incorrect = correct.iter().filter(|&&c| !c).count() as i64;
        prop_assume!(incorrect > 0);
        for k in 0..matrix.m() {
            let col = column(&matrix, k);
            let accurate = col.iter().zip(&correct).all(|(&b, &c)| !c || b);
            let passed = col.iter().zip(&correct).filter(|(&b, &c)| b && !c).count() as i64;
            let p_u = Ratio::from_integer(i64::from(accurate));
            let pass_rate = Ratio::new(passed, incorrect);
            let one = Ratio::from_integer(1i64);
            let mu = p_u * (one - pass_rate) - (one - p_u) * pass_rate;
            prop_assert_eq!(Ratio::new(unit_test_reward(&matrix, k).unwrap(), incorrect), mu);
        }
    }

    #[test]
    fn code_reward_counts_ground_truth_passes(matrix in matrix_strategy(8, 4)) {
        for j in 0..matrix.n() {
            let passes = matrix.ground_truth_cells(j).iter().filter(|&&b| b).count() as u32;
            prop_assert_eq!(code_reward(&matrix, j).unwrap(), passes);
        }
    }

    #[test]
    fn advantages_are_standardized(rewards in proptest::collection::vec(-20i32..20, 1..32)) {
        let r: Vec<f64> = rewards.iter().map(|&v| f64::from(v)).collect();
        let a = normalize_advantages(&r).unwrap();
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
        let var = a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        let constant = r.iter().all(|&v| v == r[0]);
        if constant {
            prop_assert!(a.iter().all(|&v| v == 0.0));
        } else {
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn length_transform_balances_and_prefers_short(
        pairs in proptest::collection::vec((-4i32..=4, 1u64..5000), 2..20)
    ) {
        let rewards: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let lengths: Vec<u64> = pairs.iter().map(|p| p.1).collect();
        let t = length_transform_detailed(&rewards, &lengths).unwrap();
        prop_assert_eq!(t.output.len(), rewards.len());
        let mut strict = true;
        if let Some(alpha) = t.alpha {
            // alpha is 0 only when no shaped value is negative.
            prop_assert!(alpha >= 0.0);
            strict = alpha > 0.0;
            let pos: f64 = t.shaped.iter().filter(|v| **v > 0.0).map(|v| alpha * v).sum();
            let neg: f64 = t.shaped.iter().filter(|v| **v <= 0.0).sum();
            prop_assert!((pos + neg).abs() <= 1e-9 * (1.0 + pos.abs()));
        }
        if t.sigma.is_some_and(|s| s >= 1e-12) {
            let sd = (t.output.iter().map(|v| v * v).sum::<f64>() / t.output.len() as f64
                - (t.output.iter().sum::<f64>() / t.output.len() as f64).powi(2)).sqrt();
            prop_assert!((sd - 1.0).abs() < 1e-9);
            for i in 0..rewards.len() {
                for j in 0..rewards.len() {
                    if strict && t.centered[i] > 0.0 && t.centered[j] > 0.0 && lengths[i] < lengths[j] {
                        prop_assert!(t.output[i] > t.output[j]);
                    }
                    // Every positive response is at least as good as any other.
                    if t.centered[i] > 0.0 && t.centered[j] <= 0.0 {
                        prop_assert!(t.output[i] >= t.output[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn bon_follows_a_row_permutation(matrix in matrix_strategy(10, 6), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<usize> = (0..matrix.n()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let rows: Vec<Vec<bool>> = perm.iter().map(|&p| matrix.row(p).to_vec()).collect();
        let permuted = ExecutionMatrix::new("p", matrix.m(), matrix.t_q(), rows).unwrap();

        let a = select_best(&matrix).unwrap();
        let b = select_best(&permuted).unwrap();
        prop_assert_eq!(a.scores[a.selected_row], b.scores[b.selected_row]);
        for (new, &old) in perm.iter().enumerate() {
            prop_assert_eq!(b.scores[new], a.scores[old]);
        }
        let best = a.scores[a.selected_row];
        if a.scores.iter().filter(|&&s| s == best).count() == 1 {
            prop_assert_eq!(perm[b.selected_row], a.selected_row);
        }
    }

    #[test]
    fn bon_ignores_column_order_and_all_pass_columns(matrix in matrix_strategy(10, 6)) {
        let base = select_best(&matrix).unwrap();
        let m = matrix.m();
        let rows: Vec<Vec<bool>> = (0..matrix.n())
            .map(|j| {
                let mut gen: Vec<bool> = matrix.generated_cells(j).iter().rev().copied().collect();
                gen.push(true);
                gen.extend_from_slice(matrix.ground_truth_cells(j));
                gen
            })
            .collect();
        let changed = ExecutionMatrix::new("p", m + 1, matrix.t_q(), rows).unwrap();
        prop_assert_eq!(select_best(&changed).unwrap().selected_row, base.selected_row);
    }
}

fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[test]
fn grid_matches_the_hypergeometric_oracle() {
    // 3 correct rows pass every generated test, 9 incorrect rows pass none,
    // so BoN succeeds iff the row subset contains a correct row.
    let (n, correct, m) = (12usize, 3usize, 6usize);
    let rows: Vec<Vec<bool>> = (0..n)
        .map(|j| {
            let ok = j % 4 == 1;
            let mut row = vec![ok; m];
            row.push(ok);
            row
        })
        .collect();
    let matrix = ExecutionMatrix::new("h", m, 1, rows).unwrap();
    let trials = 4000;
    let cells = grid_eval(&matrix, &[1, 2, 4, 8, 12], &[1, 3, 6], trials, 99).unwrap();
    assert_eq!(cells.len(), 15);
    for c in cells {
        let want = 1.0 - binomial((n - correct) as u64, c.n_sub as u64) / binomial(n as u64, c.n_sub as u64);
        let se = (want * (1.0 - want) / trials as f64).sqrt();
        assert!(
            (c.accuracy - want).abs() <= 4.0 * se + 1e-12,
            "n_sub={} m_sub={}: {} vs {want}",
            c.n_sub,
            c.m_sub,
            c.accuracy
        );
    }
}

#[test]
fn single_row_grid_estimates_code_accuracy() {
    let rows: Vec<Vec<bool>> = (0..10)
        .map(|j| vec![j % 3 == 0, j % 2 == 0, j < 4, j % 5 != 0])
        .collect();
    let matrix = ExecutionMatrix::new("c", 3, 1, rows).unwrap();
    let want = code_accuracy(&matrix).unwrap();
    let trials = 4000;
    let cell = grid_eval(&matrix, &[1], &[2], trials, 5).unwrap()[0];
    let se = (want * (1.0 - want) / trials as f64).sqrt();
    assert!((cell.accuracy - want).abs() <= 4.0 * se, "{} vs {want}", cell.accuracy);
}

#[test]
fn grid_is_reproducible_and_rejects_bad_sizes() {
    let rows: Vec<Vec<bool>> = (0..6).map(|j| vec![j % 2 == 0, j > 2, j % 3 == 0]).collect();
    let matrix = ExecutionMatrix::new("g", 2, 1, rows).unwrap();
    let a = grid_eval(&matrix, &[2, 4], &[1, 2], 50, 3).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let b = pool.install(|| grid_eval(&matrix, &[2, 4], &[1, 2], 50, 3).unwrap());
    assert_eq!(a, b);
    assert!(grid_eval(&matrix, &[7], &[1], 10, 3).is_err());
    assert!(grid_eval(&matrix, &[1], &[3], 10, 3).is_err());
    assert!(grid_eval(&matrix, &[0], &[1], 10, 3).is_err());
}
