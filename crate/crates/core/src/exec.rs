//! Running candidate programs on stdio tests and filling the execution matrix.
//!
//! Programs are opaque scripts handed to an external interpreter. Each run
//! gets a fresh temporary working directory, its own process group, and is
//! killed as a group when the timeout expires. There is no syscall filtering;
//! [`Runner`] is the seam for a hardened implementation.

use std::io::{self, Read, Write};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CandidateRecord, ExecutionMatrix, Task};

/// Placeholder substituted with the program path in a command template.
pub const PROGRAM_PLACEHOLDER: &str = "{program}";

pub const DEFAULT_TIMEOUT_MS: u64 = 5_000;
pub const DEFAULT_MAX_OUTPUT_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkingDirPolicy {
    #[default]
    FreshTempPerRun,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSpec {
    pub command_template: Vec<String>,
    /// File name the program is written to inside the run directory.
    pub program_file: String,
    pub timeout_ms: u64,
    pub max_output_bytes: usize,
    pub working_dir_policy: WorkingDirPolicy,
    /// Maximum number of concurrently running child processes. `0` means the
    /// number of logical CPUs.
    pub workers: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            command_template: vec!["python3".to_string(), PROGRAM_PLACEHOLDER.to_string()],
            program_file: "main.py".to_string(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            max_output_bytes: DEFAULT_MAX_OUTPUT_BYTES,
            working_dir_policy: WorkingDirPolicy::FreshTempPerRun,
            workers: 0,
        }
    }
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        if self.command_template.is_empty() {
            return Err(Error::InvalidArgument("command_template is empty".into()));
        }
        if !self.command_template.iter().any(|a| a.contains(PROGRAM_PLACEHOLDER)) {
            return Err(Error::InvalidArgument(format!(
                "command_template must contain {PROGRAM_PLACEHOLDER}"
            )));
        }
        if self.timeout_ms == 0 {
            return Err(Error::InvalidArgument("timeout_ms must be > 0".into()));
        }
        if self.max_output_bytes == 0 {
            return Err(Error::InvalidArgument("max_output_bytes must be > 0".into()));
        }
        if self.program_file.is_empty() || self.program_file.contains('/') {
            return Err(Error::InvalidArgument(
                "program_file must be a plain file name".into(),
            ));
        }
        Ok(())
    }

    pub fn effective_workers(&self) -> usize {
        if self.workers == 0 {
            thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Code(i32),
    Signal(i32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub exit_status: ExitStatus,
    pub duration_ms: u64,
    pub timed_out: bool,
}

/// Executes one program on one input.
pub trait Runner: Sync {
    fn run(&self, code: &str, input: &str, spec: &RunSpec) -> Result<RunOutcome>;
}

/// Local subprocess runner.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProcessRunner;

impl Runner for ProcessRunner {
    fn run(&self, code: &str, input: &str, spec: &RunSpec) -> Result<RunOutcome> {
        run_one(code, input, spec)
    }
}

pub fn run_one(code: &str, input: &str, spec: &RunSpec) -> Result<RunOutcome> {
    if code.is_empty() {
        return Err(Error::InvalidArgument("program text is empty".into()));
    }
    spec.validate()?;

    let dir = tempfile::Builder::new().prefix("coevo-run-").tempdir()?;
    let program = dir.path().join(&spec.program_file);
    std::fs::write(&program, code)?;
    let program = program.to_string_lossy();

    let args: Vec<String> = spec
        .command_template
        .iter()
        .map(|a| a.replace(PROGRAM_PLACEHOLDER, &program))
        .collect();

    let mut cmd = Command::new(&args[0]);
    cmd.args(&args[1..])
        .current_dir(dir.path())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }

    let started = Instant::now();
    let mut child = cmd.spawn().map_err(|e| match e.kind() {
        io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied => {
            Error::Environment(format!("{}: {e}", args[0]))
        }
        _ => Error::Spawn(e),
    })?;

    let stdin = child.stdin.take().expect("piped stdin");
    let input = input.as_bytes().to_vec();
    let feeder = thread::spawn(move || {
        let mut stdin = stdin;
        // The program may exit without reading its input.
        let _ = stdin.write_all(&input);
    });
    let out_reader = spawn_capped_reader(child.stdout.take().expect("piped stdout"), spec.max_output_bytes);
    let err_reader = spawn_capped_reader(child.stderr.take().expect("piped stderr"), spec.max_output_bytes);

    let timeout = Duration::from_millis(spec.timeout_ms);
    let (status, timed_out) = wait_with_timeout(&mut child, timeout)?;
    // Reap stragglers that inherited the pipes.
    kill_group(&child);

    let _ = feeder.join();
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();

    Ok(RunOutcome {
        stdout,
        stderr,
        exit_status: status,
        duration_ms: started.elapsed().as_millis() as u64,
        timed_out,
    })
}

fn spawn_capped_reader<R: Read + Send + 'static>(mut source: R, cap: usize) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match source.read(&mut buf) {
                Ok(0) => break,
                Ok(read) => {
                    let room = cap.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..read.min(room)]);
                    // Keep draining past the cap so the child never blocks on a full pipe.
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(_) => break,
            }
        }
        kept
    })
}

fn wait_with_timeout(child: &mut Child, timeout: Duration) -> Result<(ExitStatus, bool)> {
    let deadline = Instant::now() + timeout;
    let mut poll = Duration::from_millis(1);
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok((convert_status(status), false));
        }
        let now = Instant::now();
        if now >= deadline {
            kill_group(child);
            let status = child.wait()?;
            return Ok((convert_status(status), true));
        }
        thread::sleep(poll.min(deadline - now));
        poll = (poll * 2).min(Duration::from_millis(20));
    }
}

#[cfg(unix)]
fn kill_group(child: &Child) {
    // The child leads its own process group; signal the whole group.
    let pgid = child.id() as libc::pid_t;
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
}

#[cfg(not(unix))]
fn kill_group(child: &Child) {
    let _ = child;
}

fn convert_status(status: std::process::ExitStatus) -> ExitStatus {
    if let Some(code) = status.code() {
        return ExitStatus::Code(code);
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return ExitStatus::Signal(sig);
        }
    }
    ExitStatus::Code(-1)
}

/// Normalization applied to both sides before comparison: lossy UTF-8
/// decoding, trailing whitespace stripped per line, trailing empty lines
/// dropped.
pub fn normalize_output(bytes: &[u8]) -> String {
    let text = String::from_utf8_lossy(bytes);
    let mut lines: Vec<&str> = text.lines().map(str::trim_end).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines.join("\n")
}

/// Pass/fail verdict for one run.
pub fn judge(outcome: &RunOutcome, expected: &str) -> bool {
    !outcome.timed_out
        && outcome.exit_status == ExitStatus::Code(0)
        && normalize_output(&outcome.stdout) == normalize_output(expected.as_bytes())
}

/// Runs every valid code candidate against every valid generated test and
/// every ground-truth test of `task`.
///
/// Rows follow valid code candidates in index order; columns are valid
/// generated tests in index order followed by the task's ground-truth tests.
/// Cells run on at most `spec.workers` threads and are joined by position, so
/// the result does not depend on scheduling.
pub fn build_matrix(
    task: &Task,
    codes: &[CandidateRecord],
    tests: &[CandidateRecord],
    spec: &RunSpec,
) -> Result<ExecutionMatrix> {
    build_matrix_with(&ProcessRunner, task, codes, tests, spec)
}

pub fn build_matrix_with<R: Runner>(
    runner: &R,
    task: &Task,
    codes: &[CandidateRecord],
    tests: &[CandidateRecord],
    spec: &RunSpec,
) -> Result<ExecutionMatrix> {
    spec.validate()?;

    let mut valid_codes: Vec<(usize, &str)> = codes
        .iter()
        .filter(|c| c.task_id == task.id)
        .filter_map(|c| c.code().map(|code| (c.index, code)))
        .collect();
    valid_codes.sort_by_key(|(i, _)| *i);
    if valid_codes.is_empty() {
        return Err(Error::NoValidCandidates(task.id.clone()));
    }

    let mut valid_tests: Vec<(usize, &crate::types::TestCase)> = tests
        .iter()
        .filter(|t| t.task_id == task.id)
        .filter_map(|t| t.test().map(|tc| (t.index, tc)))
        .collect();
    valid_tests.sort_by_key(|(i, _)| *i);

    let columns: Vec<&crate::types::TestCase> = valid_tests
        .iter()
        .map(|(_, tc)| *tc)
        .chain(task.gt_tests.iter())
        .collect();
    let width = columns.len();

    let cells: Vec<(usize, usize)> = (0..valid_codes.len())
        .flat_map(|j| (0..width).map(move |k| (j, k)))
        .collect();

    let eval = |&(j, k): &(usize, usize)| -> Result<bool> {
        let outcome = runner.run(valid_codes[j].1, &columns[k].input, spec)?;
        Ok(judge(&outcome, &columns[k].expected_output))
    };

    let verdicts: Vec<bool> = {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.effective_workers())
            .build()
            .map_err(|e| Error::Environment(format!("worker pool: {e}")))?;
        pool.install(|| cells.par_iter().map(eval).collect::<Result<Vec<_>>>())?
    };

    let rows = verdicts.chunks(width.max(1)).map(<[bool]>::to_vec);
    let rows: Vec<Vec<bool>> = if width == 0 {
        vec![Vec::new(); valid_codes.len()]
    } else {
        rows.collect()
    };

    let code_total = count_group(codes, &task.id);
    let test_total = count_group(tests, &task.id);
    ExecutionMatrix::new(task.id.clone(), valid_tests.len(), task.t_q(), rows)?.with_candidates(
        valid_codes.iter().map(|(i, _)| *i).collect(),
        code_total,
        valid_tests.iter().map(|(i, _)| *i).collect(),
        test_total,
    )
}

/// Candidate group size: one past the largest index seen for the task.
fn count_group(records: &[CandidateRecord], task_id: &str) -> usize {
    records
        .iter()
        .filter(|r| r.task_id == task_id)
        .map(|r| r.index + 1)
        .max()
        .unwrap_or(0)
}
