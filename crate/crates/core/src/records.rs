//! Line-delimited JSON artifacts: tasks, candidates, matrices and rewards.
//!
//! Every written record carries a `schema` tag. Readers accept records
//! without one.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::parse::stdio_encode;
use crate::reward::RewardSet;
use crate::types::{CandidateKind, CandidateRecord, ExecutionMatrix, Payload, Task, TestCase};

pub const TASK_SCHEMA: &str = "coevo.task/1";
pub const CANDIDATE_SCHEMA: &str = "coevo.candidate/1";
pub const MATRIX_SCHEMA: &str = "coevo.matrix/1";
pub const REWARD_SCHEMA: &str = "coevo.reward/1";

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Record { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// A ground-truth test either in stdio form or as function arguments and a
/// return value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TestSpec {
    Stdio { input: String, expected_output: String },
    Functional { args: Vec<Value>, expected: Value },
}

impl TestSpec {
    pub fn to_test_case(&self) -> Result<TestCase> {
        match self {
            TestSpec::Stdio { input, expected_output } => Ok(TestCase::new(input.clone(), expected_output.clone())),
            TestSpec::Functional { args, expected } => Ok(TestCase::new(
                stdio_encode(args)?,
                stdio_encode(std::slice::from_ref(expected))?,
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    pub id: String,
    pub description: String,
    #[serde(default)]
    pub gt_tests: Vec<TestSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_code: Option<String>,
}

impl TaskLine {
    pub fn into_task(self) -> Result<Task> {
        let gt_tests = self
            .gt_tests
            .iter()
            .map(TestSpec::to_test_case)
            .collect::<Result<Vec<_>>>()?;
        Ok(Task {
            id: self.id,
            description: self.description,
            gt_tests,
            gt_code: self.gt_code,
        })
    }
}

/// Reads tasks, rejecting duplicate ids.
pub fn read_tasks<R: BufRead>(reader: R) -> Result<Vec<Task>> {
    let lines: Vec<TaskLine> = read_jsonl(reader)?;
    let mut seen = std::collections::HashSet::new();
    lines
        .into_iter()
        .map(|l| {
            if !seen.insert(l.id.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate task id {:?}", l.id)));
            }
            l.into_task()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLine {
    #[serde(default = "candidate_schema")]
    pub schema: String,
    pub task_id: String,
    pub kind: CandidateKind,
    pub index: usize,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<Payload>,
    pub valid: bool,
    #[serde(default)]
    pub length_units: u64,
}

fn candidate_schema() -> String {
    CANDIDATE_SCHEMA.to_string()
}

impl From<&CandidateRecord> for CandidateLine {
    fn from(r: &CandidateRecord) -> Self {
        Self {
            schema: candidate_schema(),
            task_id: r.task_id.clone(),
            kind: r.kind,
            index: r.index,
            raw: r.raw.clone(),
            parsed: r.parsed.clone(),
            valid: r.valid(),
            length_units: r.length_units,
        }
    }
}

impl TryFrom<CandidateLine> for CandidateRecord {
    type Error = Error;

    fn try_from(l: CandidateLine) -> Result<Self> {
        if l.valid != l.parsed.is_some() {
            return Err(Error::InvalidArgument(format!(
                "task {} {} #{}: valid flag disagrees with parsed payload",
                l.task_id, l.kind, l.index
            )));
        }
        let payload_matches = matches!(
            (&l.parsed, l.kind),
            (None, _) | (Some(Payload::Code(_)), CandidateKind::Code) | (Some(Payload::Test(_)), CandidateKind::Test)
        );
        if !payload_matches {
            return Err(Error::InvalidArgument(format!(
                "task {} {} #{}: payload does not match candidate kind",
                l.task_id, l.kind, l.index
            )));
        }
        Ok(CandidateRecord {
            task_id: l.task_id,
            kind: l.kind,
            index: l.index,
            raw: l.raw,
            parsed: l.parsed,
            length_units: l.length_units,
        })
    }
}

pub fn read_candidates<R: BufRead>(reader: R) -> Result<Vec<CandidateRecord>> {
    let lines: Vec<CandidateLine> = read_jsonl(reader)?;
    lines.into_iter().map(CandidateRecord::try_from).collect()
}

pub fn write_candidates<W: Write>(writer: W, records: &[CandidateRecord]) -> Result<()> {
    let lines: Vec<CandidateLine> = records.iter().map(CandidateLine::from).collect();
    write_jsonl(writer, &lines)
}

/// One matrix per line. `rows` holds one bitstring per code row, generated
/// columns first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixRecord {
    #[serde(default = "matrix_schema")]
    pub schema: String,
    pub task_id: String,
    pub n: usize,
    pub m: usize,
    pub t_q: usize,
    pub rows: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_total: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_total: Option<usize>,
}

fn matrix_schema() -> String {
    MATRIX_SCHEMA.to_string()
}

impl From<&ExecutionMatrix> for MatrixRecord {
    fn from(m: &ExecutionMatrix) -> Self {
        let rows = (0..m.n())
            .map(|j| m.row(j).iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect();
        Self {
            schema: matrix_schema(),
            task_id: m.task_id().to_string(),
            n: m.n(),
            m: m.m(),
            t_q: m.t_q(),
            rows,
            code_indices: Some(m.code_indices().to_vec()),
            test_indices: Some(m.test_indices().to_vec()),
            code_total: Some(m.code_total()),
            test_total: Some(m.test_total()),
        }
    }
}

impl TryFrom<MatrixRecord> for ExecutionMatrix {
    type Error = Error;

    fn try_from(r: MatrixRecord) -> Result<Self> {
        if r.rows.len() != r.n {
            return Err(Error::Shape(format!(
                "task {}: n = {} but {} rows",
                r.task_id,
                r.n,
                r.rows.len()
            )));
        }
        let rows = r
            .rows
            .iter()
            .map(|s| {
                s.chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        other => Err(Error::Shape(format!("task {}: invalid cell {other:?}", r.task_id))),
                    })
                    .collect::<Result<Vec<bool>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let matrix = ExecutionMatrix::new(r.task_id, r.m, r.t_q, rows)?;
        let code_indices = r.code_indices.unwrap_or_else(|| (0..matrix.n()).collect());
        let test_indices = r.test_indices.unwrap_or_else(|| (0..matrix.m()).collect());
        let code_total = r.code_total.unwrap_or(matrix.n());
        let test_total = r.test_total.unwrap_or(matrix.m());
        matrix.with_candidates(code_indices, code_total, test_indices, test_total)
    }
}

pub fn read_matrices<R: BufRead>(reader: R) -> Result<Vec<ExecutionMatrix>> {
    let lines: Vec<MatrixRecord> = read_jsonl(reader)?;
    lines.into_iter().map(ExecutionMatrix::try_from).collect()
}

pub fn write_matrices<W: Write>(writer: W, matrices: &[ExecutionMatrix]) -> Result<()> {
    let lines: Vec<MatrixRecord> = matrices.iter().map(MatrixRecord::from).collect();
    write_jsonl(writer, &lines)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLine {
    #[serde(default = "reward_schema")]
    pub schema: String,
    #[serde(flatten)]
    pub set: RewardSet,
}

fn reward_schema() -> String {
    REWARD_SCHEMA.to_string()
}

pub fn write_rewards<W: Write>(writer: W, sets: &[RewardSet]) -> Result<()> {
    let lines: Vec<RewardLine> = sets
        .iter()
        .map(|s| RewardLine {
            schema: reward_schema(),
            set: s.clone(),
        })
        .collect();
    write_jsonl(writer, &lines)
}

pub fn read_rewards<R: BufRead>(reader: R) -> Result<Vec<RewardSet>> {
    let lines: Vec<RewardLine> = read_jsonl(reader)?;
    Ok(lines.into_iter().map(|l| l.set).collect())
}
