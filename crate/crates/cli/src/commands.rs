use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use coevo_core::bon::{code_accuracy, grid_eval, select_best, summary_csv, summary_table, ut_accuracy, SummaryRow};
use coevo_core::exec::build_matrix;
use coevo_core::gateway::{generate_indices, HttpChatProvider, PromptTemplate, ProviderConfig, SamplingConfig};
use coevo_core::parse::parse_candidate;
use coevo_core::records::{
    read_candidates, read_jsonl, read_matrices, read_tasks, write_candidates, write_matrices, write_rewards,
};
use coevo_core::reward::{assign_group_rewards, RewardMode};
use coevo_core::seed::derive_seed;
use coevo_core::theory::{
    coevolve_sim, estimator_check, estimator_csv, precision_csv, precision_mc, CoevolutionConfig, GenerativeProcess,
};
use coevo_core::{correctness_vector, CandidateKind, CandidateRecord, Error};
use serde::Deserialize;

use crate::config::{require_path, PipelineConfig};
use crate::{
    BonArgs, Experiment, GenerateArgs, MatrixArgs, ParseArgs, PartialFailure, ProcessArgs, RewardArgs, UsageError,
};

/// Core errors caused by bad arguments or a broken environment become usage
/// errors; everything else stays a runtime failure.
fn classify(e: Error) -> anyhow::Error {
    match e {
        Error::InvalidArgument(_)
        | Error::SubsampleTooLarge { .. }
        | Error::Environment(_)
        | Error::Prompt(_) => UsageError(e.to_string()).into(),
        other => other.into(),
    }
}

fn open_input(path: &Path) -> anyhow::Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| UsageError(format!("cannot open {}: {e}", path.display())).into())
}

/// Loads an input artifact; unreadable or malformed files are usage errors.
fn load<T>(path: &Path, read: impl FnOnce(BufReader<File>) -> coevo_core::Result<T>) -> anyhow::Result<T> {
    let reader = open_input(path)?;
    read(reader).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}

fn write_output(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => write_output(path, text.as_bytes()),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn partial(failed: usize, total: usize, what: &str) -> anyhow::Result<()> {
    if failed == 0 {
        Ok(())
    } else {
        Err(PartialFailure(format!("{failed} of {total} {what} failed")).into())
    }
}

#[derive(Deserialize)]
struct RawResponse {
    task_id: String,
    kind: CandidateKind,
    index: usize,
    raw: String,
    #[serde(default)]
    length_units: Option<u64>,
}

pub fn parse(cfg: &PipelineConfig, args: ParseArgs) -> anyhow::Result<()> {
    let raws: Vec<RawResponse> = load(&args.input, read_jsonl)?;
    let mut failures = 0;
    let records: Vec<CandidateRecord> = raws
        .into_iter()
        .map(|r| {
            let (record, failure) = parse_candidate(&r.task_id, r.kind, r.index, r.raw, r.length_units, &cfg.think);
            if let Some(f) = failure {
                failures += 1;
                log::info!("{} {} #{}: {f}", record.task_id, record.kind, record.index);
            }
            record
        })
        .collect();
    log::info!("{} responses, {failures} formatting errors", records.len());
    let mut buf = Vec::new();
    write_candidates(&mut buf, &records)?;
    write_output(&args.out, &buf)
}

pub fn matrix(cfg: &PipelineConfig, args: MatrixArgs) -> anyhow::Result<()> {
    let tasks_path = require_path(args.tasks, &cfg.paths.tasks, "tasks")?;
    let codes_path = require_path(args.codes, &cfg.paths.codes, "code candidates")?;
    let out = require_path(args.out, &cfg.paths.matrices, "matrix output")?;

    let tasks = load(&tasks_path, read_tasks)?;
    let codes = load(&codes_path, read_candidates)?;
    let tests = match args.tests.or_else(|| cfg.paths.tests.clone()) {
        Some(p) => load(&p, read_candidates)?,
        None => Vec::new(),
    };

    let mut spec = cfg.run.clone();
    if let Some(t) = args.timeout_ms {
        spec.timeout_ms = t;
    }
    if let Some(b) = args.max_output_bytes {
        spec.max_output_bytes = b;
    }
    if let Some(w) = args.workers {
        spec.workers = w;
    }
    if let Some(c) = args.command {
        spec.command_template = c.split_whitespace().map(str::to_string).collect();
    }
    spec.validate().map_err(classify)?;

    let mut matrices = Vec::with_capacity(tasks.len());
    let mut failed = 0;
    for task in &tasks {
        match build_matrix(task, &codes, &tests, &spec) {
            Ok(m) => {
                log::info!("task {}: n={} m={} t_q={}", task.id, m.n(), m.m(), m.t_q());
                matrices.push(m);
            }
            Err(e @ Error::Environment(_)) => return Err(classify(e)),
            Err(e) => {
                log::warn!("task {}: {e}", task.id);
                failed += 1;
            }
        }
    }

    let mut buf = Vec::new();
    write_matrices(&mut buf, &matrices)?;
    write_output(&out, &buf)?;
    partial(failed, tasks.len(), "tasks")
}

pub fn reward(cfg: &PipelineConfig, args: RewardArgs) -> anyhow::Result<()> {
    let matrices_path = require_path(args.matrices, &cfg.paths.matrices, "matrices")?;
    let out = require_path(args.out, &cfg.paths.rewards, "reward output")?;
    let mode = match args.mode {
        Some(s) => s.parse::<RewardMode>().map_err(classify)?,
        None => cfg.reward.mode.unwrap_or_default(),
    };
    let long_cot = args.long_cot || cfg.reward.long_cot.unwrap_or(false);

    let matrices = load(&matrices_path, read_matrices)?;

    // task id -> index -> length
    let mut lengths: HashMap<String, BTreeMap<usize, u64>> = HashMap::new();
    if long_cot {
        let path = args
            .lengths
            .or_else(|| cfg.paths.tests.clone())
            .ok_or_else(|| UsageError("--long-cot needs --lengths (the test candidates file)".into()))?;
        for r in load(&path, read_candidates)? {
            if r.kind == CandidateKind::Test {
                lengths.entry(r.task_id).or_default().insert(r.index, r.length_units);
            }
        }
    }

    let mut sets = Vec::with_capacity(2 * matrices.len());
    let mut failed = 0;
    for matrix in &matrices {
        let task_lengths: Option<Vec<u64>> = if long_cot {
            let known = lengths.get(matrix.task_id());
            let collected: Option<Vec<u64>> = (0..matrix.test_total())
                .map(|i| known.and_then(|k| k.get(&i).copied()))
                .collect();
            if collected.is_none() {
                log::warn!("task {}: lengths missing for some test candidates", matrix.task_id());
                failed += 1;
                continue;
            }
            collected
        } else {
            None
        };
        match assign_group_rewards(matrix, mode, long_cot, task_lengths.as_deref()) {
            Ok((code, test)) => {
                sets.push(code);
                sets.push(test);
            }
            Err(e) => {
                log::warn!("task {}: {e}", matrix.task_id());
                failed += 1;
            }
        }
    }

    let mut buf = Vec::new();
    write_rewards(&mut buf, &sets)?;
    write_output(&out, &buf)?;
    partial(failed, matrices.len(), "tasks")
}

pub fn bon(cfg: &PipelineConfig, args: BonArgs) -> anyhow::Result<()> {
    let seed = cfg.seed(args.seed)?;
    let matrices_path = require_path(args.matrices, &cfg.paths.matrices, "matrices")?;
    let out_dir = require_path(args.out_dir, &cfg.paths.reports, "report directory")?;
    if args.n_list.is_empty() || args.m_list.is_empty() || args.n_list.contains(&0) || args.m_list.contains(&0) {
        return Err(UsageError("--n-list and --m-list must be non-empty lists of positive sizes".into()).into());
    }
    if args.trials == 0 {
        return Err(UsageError("--trials must be >= 1".into()).into());
    }

    let matrices = load(&matrices_path, read_matrices)?;

    let mut code_sum = 0.0;
    let mut bon_sum = 0.0;
    let mut used = 0usize;
    let mut failed = 0usize;
    // (n_sub, m_sub) -> (accuracy sum, tasks)
    let mut grid: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();

    for (pos, matrix) in matrices.iter().enumerate() {
        let correct = match correctness_vector(matrix) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("task {}: {e}", matrix.task_id());
                failed += 1;
                continue;
            }
        };
        // With no generated tests every score is zero and the first row wins.
        let row = if matrix.m() == 0 { 0 } else { select_best(matrix)?.selected_row };
        bon_sum += f64::from(u8::from(correct.flags[row]));
        code_sum += code_accuracy(matrix)?;
        used += 1;

        let task_seed = derive_seed(seed, &[pos as u64]);
        for &n_sub in &args.n_list {
            for &m_sub in &args.m_list {
                if n_sub > matrix.n() || m_sub > matrix.m() {
                    continue;
                }
                let cell = grid_eval(matrix, &[n_sub], &[m_sub], args.trials, task_seed)?[0];
                let slot = grid.entry((n_sub, m_sub)).or_insert((0.0, 0));
                slot.0 += cell.accuracy;
                slot.1 += 1;
            }
        }
    }

    let ut = match (&args.tasks, &args.tests) {
        (Some(tasks_path), Some(tests_path)) => ut_column(cfg, tasks_path, tests_path, &matrices)?,
        _ => None,
    };

    let mean = |sum: f64| if used == 0 { 0.0 } else { sum / used as f64 };
    let rows = [SummaryRow {
        label: args.label.clone(),
        tasks: used,
        ut,
        code: mean(code_sum),
        bon: mean(bon_sum),
    }];

    let mut grid_text = String::from("n_sub,m_sub,tasks,bon_accuracy\n");
    for &n_sub in &args.n_list {
        for &m_sub in &args.m_list {
            match grid.get(&(n_sub, m_sub)) {
                Some(&(sum, tasks)) => {
                    grid_text.push_str(&format!("{n_sub},{m_sub},{tasks},{:.6}\n", sum / tasks as f64))
                }
                None => log::info!("grid cell n={n_sub} m={m_sub}: no task large enough"),
            }
        }
    }

    let table = summary_table(&rows);
    write_output(&out_dir.join("bon_grid.csv"), grid_text.as_bytes())?;
    write_output(&out_dir.join("summary.csv"), summary_csv(&rows).as_bytes())?;
    write_output(&out_dir.join("summary.txt"), table.as_bytes())?;
    print!("{table}");
    partial(failed, matrices.len(), "tasks")
}

/// Mean UT accuracy over the report's tasks that have a reference solution.
fn ut_column(
    cfg: &PipelineConfig,
    tasks_path: &Path,
    tests_path: &Path,
    matrices: &[coevo_core::ExecutionMatrix],
) -> anyhow::Result<Option<f64>> {
    let tasks = load(tasks_path, read_tasks)?;
    let tests = load(tests_path, read_candidates)?;
    let by_id: HashMap<&str, &coevo_core::Task> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();

    let mut sum = 0.0;
    let mut count = 0usize;
    for matrix in matrices {
        let Some(gt_code) = by_id.get(matrix.task_id()).and_then(|t| t.gt_code.as_deref()) else {
            continue;
        };
        let group: Vec<CandidateRecord> = tests
            .iter()
            .filter(|t| t.task_id == matrix.task_id() && t.kind == CandidateKind::Test)
            .cloned()
            .collect();
        sum += ut_accuracy(&group, gt_code, &cfg.run).map_err(classify)?;
        count += 1;
    }
    if count == 0 {
        log::warn!("no task has a reference solution; UT column left empty");
        return Ok(None);
    }
    Ok(Some(sum / count as f64))
}

fn process_of(p: &ProcessArgs) -> anyhow::Result<GenerativeProcess> {
    GenerativeProcess::new(p.p_s, p.p_u, p.p_00, p.p_01).map_err(classify)
}

pub fn simulate(cfg: &PipelineConfig, experiment: Experiment) -> anyhow::Result<()> {
    match experiment {
        Experiment::Theorem1 {
            process,
            m_list,
            trials,
            seed,
            out,
        } => {
            let seed = cfg.seed(seed)?;
            let process = process_of(&process)?;
            let rows = m_list
                .iter()
                .map(|&m| precision_mc(&process, m, trials, seed))
                .collect::<coevo_core::Result<Vec<_>>>()
                .map_err(classify)?;
            emit(out.as_deref(), &precision_csv(&rows))
        }
        Experiment::Estimators {
            process,
            n_list,
            m,
            trials,
            seed,
            out,
        } => {
            let seed = cfg.seed(seed)?;
            let process = process_of(&process)?;
            let rows = n_list
                .iter()
                .map(|&n| estimator_check(&process, n, m, trials, seed))
                .collect::<coevo_core::Result<Vec<_>>>()
                .map_err(classify)?;
            emit(out.as_deref(), &estimator_csv(&rows))
        }
        Experiment::Coevolve {
            p_s,
            p_u,
            p_00,
            p_01,
            steps,
            n,
            m,
            t_q,
            lr,
            seed,
            out,
        } => {
            let seed = cfg.seed(seed)?;
            let initial = GenerativeProcess::new(p_s, p_u, p_00, p_01).map_err(classify)?;
            let config = CoevolutionConfig {
                steps,
                n,
                m,
                t_q,
                learning_rate: lr,
                seed,
            };
            let trace = coevolve_sim(&initial, &config).map_err(classify)?;
            emit(out.as_deref(), &trace.to_csv())
        }
    }
}

fn provider_config(cfg: &PipelineConfig, file: Option<PathBuf>) -> anyhow::Result<ProviderConfig> {
    match file {
        Some(path) => {
            let text = fs::read_to_string(&path)
                .map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| UsageError(format!("invalid provider file {}: {e}", path.display())).into())
        }
        None => cfg
            .provider
            .clone()
            .ok_or_else(|| UsageError("no provider configured (use --provider or a [provider] section)".into()).into()),
    }
}

pub fn generate(cfg: &PipelineConfig, args: GenerateArgs) -> anyhow::Result<()> {
    let tasks_path = require_path(args.tasks, &cfg.paths.tasks, "tasks")?;
    let kind: CandidateKind = args.kind.parse().map_err(classify)?;
    let provider_cfg = provider_config(cfg, args.provider)?;
    let mut sampling = cfg.sampling.clone().unwrap_or_else(|| {
        if args.long_cot {
            SamplingConfig::long_cot()
        } else {
            SamplingConfig::default()
        }
    });
    if let Some(n) = args.num_samples {
        sampling.num_samples = n;
    }
    sampling.validate().map_err(classify)?;
    let template = match &args.template {
        Some(p) => PromptTemplate::from_file(p).map_err(|e| UsageError(format!("{}: {e}", p.display())))?,
        None => PromptTemplate::for_kind(kind),
    };

    let tasks = load(&tasks_path, read_tasks)?;

    // Resume: keep what is already on disk and only ask for missing indices.
    let mut done: HashMap<String, BTreeSet<usize>> = HashMap::new();
    if args.out.exists() {
        for r in load(&args.out, read_candidates)? {
            if r.kind != kind {
                return Err(UsageError(format!(
                    "{} already holds {} candidates; refusing to mix kinds",
                    args.out.display(),
                    r.kind
                ))
                .into());
            }
            done.entry(r.task_id).or_default().insert(r.index);
        }
    }

    let provider = HttpChatProvider::new(&provider_cfg).map_err(|e| UsageError(e.to_string()))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&args.out)
        .with_context(|| format!("opening {}", args.out.display()))?;

    let mut failed = 0usize;
    let mut requested = 0usize;
    for task in &tasks {
        let have = done.get(&task.id);
        let missing: Vec<usize> = (0..sampling.num_samples)
            .filter(|i| !have.is_some_and(|h| h.contains(i)))
            .collect();
        if missing.is_empty() {
            continue;
        }
        requested += missing.len();
        let outcome = generate_indices(task, kind, &missing, &template, &sampling, &provider, &provider_cfg, &cfg.think)
            .map_err(|e| anyhow!("task {}: {e}", task.id))?;
        let mut buf = Vec::new();
        write_candidates(&mut buf, &outcome.records)?;
        file.write_all(&buf)?;
        file.flush()?;
        for f in &outcome.failures {
            log::warn!("task {} {kind} #{}: {}", task.id, f.index, f.message);
        }
        failed += outcome.failures.len();
    }
    log::info!("requested {requested} samples, {failed} failed");
    partial(failed, requested, "requests")
}
