//! Shared domain types: tasks, candidates and the execution matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single stdio test: bytes fed on stdin and the expected stdout.
///
/// Both fields are kept exactly as provided. Normalization only happens at
/// judging time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestCase {
    pub input: String,
    pub expected_output: String,
}

impl TestCase {
    pub fn new(input: impl Into<String>, expected_output: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            expected_output: expected_output.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub id: String,
    pub description: String,
    pub gt_tests: Vec<TestCase>,
    /// Reference solution. Only used to score generated-test accuracy.
    pub gt_code: Option<String>,
}

impl Task {
    pub fn t_q(&self) -> usize {
        self.gt_tests.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateKind {
    Code,
    Test,
}

impl CandidateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CandidateKind::Code => "code",
            CandidateKind::Test => "test",
        }
    }
}

impl std::fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CandidateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "code" => Ok(CandidateKind::Code),
            "test" => Ok(CandidateKind::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown candidate kind {other:?} (expected \"code\" or \"test\")"
            ))),
        }
    }
}

/// Extracted content of a model response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Code(String),
    Test(TestCase),
}

impl Payload {
    pub fn as_code(&self) -> Option<&str> {
        match self {
            Payload::Code(code) => Some(code),
            Payload::Test(_) => None,
        }
    }

    pub fn as_test(&self) -> Option<&TestCase> {
        match self {
            Payload::Test(test) => Some(test),
            Payload::Code(_) => None,
        }
    }
}

/// One raw model response together with its parse outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateRecord {
    pub task_id: String,
    pub kind: CandidateKind,
    pub index: usize,
    pub raw: String,
    pub parsed: Option<Payload>,
    pub length_units: u64,
}

impl CandidateRecord {
    /// A candidate is valid exactly when something was extracted from it.
    pub fn valid(&self) -> bool {
        self.parsed.is_some()
    }

    pub fn code(&self) -> Option<&str> {
        self.parsed.as_ref().and_then(Payload::as_code)
    }

    pub fn test(&self) -> Option<&TestCase> {
        self.parsed.as_ref().and_then(Payload::as_test)
    }
}

/// Number of whitespace-separated units in a response. Used as the length
/// when the provider does not report a token count.
pub fn whitespace_units(raw: &str) -> u64 {
    raw.split_whitespace().count() as u64
}

/// Checks that indices within each `(task_id, kind)` group are distinct and
/// contiguous from zero.
pub fn check_candidate_indices(records: &[CandidateRecord]) -> Result<()> {
    use std::collections::BTreeMap;

    let mut groups: BTreeMap<(&str, CandidateKind), Vec<usize>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.task_id.as_str(), r.kind))
            .or_default()
            .push(r.index);
    }
    for ((task, kind), mut indices) in groups {
        indices.sort_unstable();
        for (expected, got) in indices.iter().enumerate() {
            if *got != expected {
                return Err(Error::InvalidArgument(format!(
                    "task {task}: {kind} candidate indices are not contiguous from 0 (found {got}, expected {expected})"
                )));
            }
        }
    }
    Ok(())
}

/// Binary pass/fail grid of `n` code candidates against `m` generated tests
/// followed by `t_q` ground-truth tests.
///
/// Only valid candidates appear in the grid. `code_indices[j]` and
/// `test_indices[k]` give the candidate index behind row `j` and generated
/// column `k`; `code_total` and `test_total` count every candidate of the
/// group, including ones that failed to parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionMatrix {
    task_id: String,
    n: usize,
    m: usize,
    t_q: usize,
    bits: Vec<bool>,
    code_indices: Vec<usize>,
    test_indices: Vec<usize>,
    code_total: usize,
    test_total: usize,
}

impl ExecutionMatrix {
    /// Builds a matrix from rows of `m + t_q` cells, generated columns first.
    /// Candidate maps default to the identity.
    pub fn new(task_id: impl Into<String>, m: usize, t_q: usize, rows: Vec<Vec<bool>>) -> Result<Self> {
        let task_id = task_id.into();
        let n = rows.len();
        if n == 0 {
            return Err(Error::NoValidCandidates(task_id));
        }
        let width = m + t_q;
        let mut bits = Vec::with_capacity(n * width);
        for (j, row) in rows.into_iter().enumerate() {
            if row.len() != width {
                return Err(Error::Shape(format!(
                    "row {j} has {} cells, expected m + t_q = {width}",
                    row.len()
                )));
            }
            bits.extend(row);
        }
        Ok(Self {
            task_id,
            n,
            m,
            t_q,
            bits,
            code_indices: (0..n).collect(),
            test_indices: (0..m).collect(),
            code_total: n,
            test_total: m,
        })
    }

    /// Attaches candidate metadata. `code_indices` must have `n` distinct
    /// entries below `code_total`, likewise for tests.
    pub fn with_candidates(
        mut self,
        code_indices: Vec<usize>,
        code_total: usize,
        test_indices: Vec<usize>,
        test_total: usize,
    ) -> Result<Self> {
        check_index_map("code", &code_indices, self.n, code_total)?;
        check_index_map("test", &test_indices, self.m, test_total)?;
        self.code_indices = code_indices;
        self.test_indices = test_indices;
        self.code_total = code_total;
        self.test_total = test_total;
        Ok(self)
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    /// Number of code candidates (rows).
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of generated test columns.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of ground-truth test columns.
    pub fn t_q(&self) -> usize {
        self.t_q
    }

    pub fn width(&self) -> usize {
        self.m + self.t_q
    }

    pub fn code_indices(&self) -> &[usize] {
        &self.code_indices
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test_indices
    }

    pub fn code_total(&self) -> usize {
        self.code_total
    }

    pub fn test_total(&self) -> usize {
        self.test_total
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        assert!(row < self.n && col < self.width(), "cell ({row}, {col}) out of range");
        self.bits[row * self.width() + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        let w = self.width();
        &self.bits[row * w..(row + 1) * w]
    }

    pub fn generated_cells(&self, row: usize) -> &[bool] {
        &self.row(row)[..self.m]
    }

    pub fn ground_truth_cells(&self, row: usize) -> &[bool] {
        &self.row(row)[self.m..]
    }

    /// Cells of one column, top to bottom.
    pub fn column(&self, col: usize) -> impl Iterator<Item = bool> + '_ {
        assert!(col < self.width(), "column {col} out of range");
        (0..self.n).map(move |j| self.get(j, col))
    }

    pub fn check_row(&self, row: usize) -> Result<()> {
        if row < self.n {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                axis: "row",
                index: row,
                size: self.n,
            })
        }
    }

    pub fn check_generated_column(&self, col: usize) -> Result<()> {
        if col < self.m {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                axis: "generated column",
                index: col,
                size: self.m,
            })
        }
    }

    /// Keeps the given rows and generated columns (in the given order) and all
    /// ground-truth columns. Candidate maps follow the selection.
    pub fn submatrix(&self, rows: &[usize], generated: &[usize]) -> Result<Self> {
        for &j in rows {
            self.check_row(j)?;
        }
        for &k in generated {
            self.check_generated_column(k)?;
        }
        let cols: Vec<usize> = generated
            .iter()
            .copied()
            .chain(self.m..self.width())
            .collect();
        let grid = rows
            .iter()
            .map(|&j| cols.iter().map(|&c| self.get(j, c)).collect())
            .collect();
        let code_indices = rows.iter().map(|&j| self.code_indices[j]).collect();
        let test_indices = generated.iter().map(|&k| self.test_indices[k]).collect();
        Self::new(self.task_id.clone(), generated.len(), self.t_q, grid)?.with_candidates(
            code_indices,
            self.code_total,
            test_indices,
            self.test_total,
        )
    }
}

fn check_index_map(axis: &'static str, map: &[usize], expected_len: usize, total: usize) -> Result<()> {
    if map.len() != expected_len {
        return Err(Error::Shape(format!(
            "{axis} index map has {} entries, matrix has {expected_len}",
            map.len()
        )));
    }
    let mut seen = vec![false; total];
    for &idx in map {
        if idx >= total {
            return Err(Error::IndexOutOfRange {
                axis,
                index: idx,
                size: total,
            });
        }
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::Shape(format!("{axis} index {idx} appears twice")));
        }
    }
    Ok(())
}

/// Ground-truth correctness of each code row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectnessVector {
    pub flags: Vec<bool>,
}

impl CorrectnessVector {
    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn num_correct(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn num_incorrect(&self) -> usize {
        self.len() - self.num_correct()
    }
}

/// A row is correct iff it passes every ground-truth column.
pub fn correctness_vector(matrix: &ExecutionMatrix) -> Result<CorrectnessVector> {
    if matrix.t_q() == 0 {
        return Err(Error::GroundTruthMissing(matrix.task_id().to_string()));
    }
    let flags = (0..matrix.n())
        .map(|j| matrix.ground_truth_cells(j).iter().all(|&b| b))
        .collect();
    Ok(CorrectnessVector { flags })
}
