//! Best-of-N selection with generated unit tests, accuracy metrics, and the
//! subsampling grid used for test-time scaling curves.

use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{judge, ProcessRunner, RunSpec, Runner};
use crate::seed::trial_rng;
use crate::types::{correctness_vector, CandidateRecord, ExecutionMatrix};

/// Number of generated tests passed by row `j`.
pub fn bon_reward(matrix: &ExecutionMatrix, j: usize) -> Result<u32> {
    if matrix.m() == 0 {
        return Err(Error::NoGeneratedTests(matrix.task_id().to_string()));
    }
    matrix.check_row(j)?;
    Ok(matrix.generated_cells(j).iter().filter(|&&b| b).count() as u32)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BonResult {
    pub task_id: String,
    pub selected_row: usize,
    pub scores: Vec<u32>,
    /// Known only when the matrix carries ground-truth columns.
    pub selected_is_correct: Option<bool>,
}

/// Index of the first maximum.
pub fn argmax_first(scores: &[u32]) -> Option<usize> {
    let best = *scores.iter().max()?;
    scores.iter().position(|&s| s == best)
}

/// Picks the row passing the most generated tests; ties go to the lowest row.
pub fn select_best(matrix: &ExecutionMatrix) -> Result<BonResult> {
    let scores = (0..matrix.n())
        .map(|j| bon_reward(matrix, j))
        .collect::<Result<Vec<_>>>()?;
    let selected_row = argmax_first(&scores).expect("matrix has at least one row");
    let selected_is_correct = match matrix.t_q() {
        0 => None,
        _ => Some(correctness_vector(matrix)?.flags[selected_row]),
    };
    Ok(BonResult {
        task_id: matrix.task_id().to_string(),
        selected_row,
        scores,
        selected_is_correct,
    })
}

/// Fraction of rows that pass every ground-truth test.
pub fn code_accuracy(matrix: &ExecutionMatrix) -> Result<f64> {
    let cv = correctness_vector(matrix)?;
    Ok(cv.num_correct() as f64 / cv.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridCell {
    pub n_sub: usize,
    pub m_sub: usize,
    pub accuracy: f64,
}

/// Mean best-of-N correctness over random subsets of `n_sub` rows and
/// `m_sub` generated columns, for every pair in `n_list × m_list`.
///
/// Subsets are drawn without replacement from a generator seeded by
/// `(seed, n_sub, m_sub, trial)` and kept in original order, so the
/// lowest-index tie-break still prefers earlier candidates.
pub fn grid_eval(
    matrix: &ExecutionMatrix,
    n_list: &[usize],
    m_list: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<GridCell>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let correct = correctness_vector(matrix)?;
    for &n_sub in n_list {
        check_subsample("rows", n_sub, matrix.n())?;
    }
    for &m_sub in m_list {
        check_subsample("generated columns", m_sub, matrix.m())?;
    }

    let mut cells = Vec::with_capacity(n_list.len() * m_list.len());
    for &n_sub in n_list {
        for &m_sub in m_list {
            let hits = (0..trials)
                .into_par_iter()
                .map(|trial| -> Result<usize> {
                    let mut rng = trial_rng(seed, &[n_sub as u64, m_sub as u64, trial as u64]);
                    let mut rows = index::sample(&mut rng, matrix.n(), n_sub).into_vec();
                    let mut cols = index::sample(&mut rng, matrix.m(), m_sub).into_vec();
                    rows.sort_unstable();
                    cols.sort_unstable();
                    let sub = matrix.submatrix(&rows, &cols)?;
                    let picked = select_best(&sub)?.selected_row;
                    Ok(correct.flags[rows[picked]] as usize)
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum::<usize>();
            cells.push(GridCell {
                n_sub,
                m_sub,
                accuracy: hits as f64 / trials as f64,
            });
        }
    }
    Ok(cells)
}

fn check_subsample(axis: &'static str, requested: usize, available: usize) -> Result<()> {
    if requested == 0 {
        return Err(Error::InvalidArgument(format!("subsample of {axis} must be >= 1")));
    }
    if requested > available {
        return Err(Error::SubsampleTooLarge {
            axis,
            requested,
            available,
        });
    }
    Ok(())
}

/// Fraction of generated tests whose expected output matches what the
/// reference solution prints on the test's input. Tests that failed to parse
/// count as wrong; an empty list scores 0.
pub fn ut_accuracy(tests: &[CandidateRecord], gt_code: &str, spec: &RunSpec) -> Result<f64> {
    ut_accuracy_with(&ProcessRunner, tests, gt_code, spec)
}

pub fn ut_accuracy_with<R: Runner>(
    runner: &R,
    tests: &[CandidateRecord],
    gt_code: &str,
    spec: &RunSpec,
) -> Result<f64> {
    if tests.is_empty() {
        return Ok(0.0);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.effective_workers())
        .build()
        .map_err(|e| Error::Environment(format!("worker pool: {e}")))?;
    let verdicts = pool.install(|| {
        tests
            .par_iter()
            .map(|t| match t.test() {
                Some(tc) => Ok(judge(&runner.run(gt_code, &tc.input, spec)?, &tc.expected_output)),
                None => Ok(false),
            })
            .collect::<Result<Vec<bool>>>()
    })?;
    Ok(verdicts.iter().filter(|&&v| v).count() as f64 / tests.len() as f64)
}

/// One row of the accuracy report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub tasks: usize,
    pub ut: Option<f64>,
    pub code: f64,
    pub bon: f64,
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("label,tasks,ut,code,bon\n");
    for r in rows {
        let ut = r.ut.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.label, r.tasks, ut, r.code, r.bon));
    }
    out
}

/// Fixed-width text table with percentages.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
    let mut out = format!("{:<width$}  {:>6}  {:>7}  {:>7}  {:>7}\n", "Task set", "Tasks", "UT", "Code", "BoN");
    out.push_str(&format!("{}\n", "-".repeat(width + 37)));
    for r in rows {
        let ut = r.ut.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>7}  {:>7.1}  {:>7.1}\n",
            r.label,
            r.tasks,
            ut,
            100.0 * r.code,
            100.0 * r.bon
        ));
    }
    out
}

pub fn grid_csv(cells: &[GridCell]) -> String {
    let mut out = String::from("n_sub,m_sub,bon_accuracy\n");
    for c in cells {
        out.push_str(&format!("{},{},{:.6}\n", c.n_sub, c.m_sub, c.accuracy));
    }
    out
}
