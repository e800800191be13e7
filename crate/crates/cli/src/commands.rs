use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use hdlagent::eval::{aggregate, emit_report, Aggregate, ReportFormat};
use hdlagent::forge::{
    generate_pairs, load_corpus, run_pipeline, write_manifest, ExamplePool, ForgeError, GoldenIndex,
};
use hdlagent::llm::{Limiters, LlmError, RoleBackends, RoleSpecs};
use hdlagent::model::{load_task, RtlTask, TaskError};
use hdlagent::orchestrator::{
    run_parallel, OutcomeFile, ParallelConfig, ParallelOutcome, RunDir, RunRole, RunTiming, Schedule,
    OUTCOME_FILE, WINNER_FILE,
};
use hdlagent::sim::SimHarness;
use hdlagent::CancelToken;

use crate::config::GlobalConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_UNSOLVED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TOOL: i32 = 3;

/// A command failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn tool(message: impl Into<String>) -> Self {
        Self { code: EXIT_TOOL, message: message.into() }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CmdResult = Result<i32, Failure>;

/// Overrides shared by `run` and `bench`.
#[derive(Debug, Clone, Default)]
pub struct LoopFlags {
    pub parallel: Option<usize>,
    pub max_iter: Option<usize>,
    pub seed: Option<u64>,
    pub schedule: Option<Schedule>,
}

impl LoopFlags {
    pub fn apply(&self, config: &mut GlobalConfig) {
        if let Some(p) = self.parallel {
            config.parallel.processes = p;
        }
        if let Some(n) = self.max_iter {
            config.loop_config.max_iterations = n;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(s) = self.schedule {
            config.parallel.schedule = s;
        }
    }
}

/// Backend stream of process `pid` in a run seeded with `seed`.
pub fn stream_id(seed: u64, pid: usize) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(pid as u64)
}

fn harness(config: &GlobalConfig) -> Result<SimHarness, Failure> {
    if !config.sim.toolchain_available() {
        return Err(Failure::tool(format!(
            "simulator `{}` not found (set HDLAGENT_SIMULATOR or the sim section)",
            config.sim.compiler_command
        )));
    }
    Ok(SimHarness::new(config.sim.clone()))
}

fn race(
    task: &RtlTask,
    roles: &RoleSpecs,
    harness: &SimHarness,
    config: &ParallelConfig,
    seed: u64,
    dir: &RunDir,
) -> ParallelOutcome {
    let limiters = Limiters::default();
    let factory = |pid: usize| -> Result<RoleBackends, LlmError> { roles.build(stream_id(seed, pid), &limiters) };
    let observers = |pid: usize| dir.observer(pid);
    run_parallel(task, &factory, harness, config, &CancelToken::new(), Some(&observers))
}

/// Drops files a previous run left in `dir`.
fn clear_run_dir(dir: &Path) -> std::io::Result<()> {
    let Ok(entries) = fs::read_dir(dir) else { return Ok(()) };
    for e in entries {
        let p = e?.path();
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let ours = name == OUTCOME_FILE
            || name == WINNER_FILE
            || (name.starts_with("trajectory_p") && name.ends_with(".jsonl"));
        if ours && p.is_file() {
            fs::remove_file(p)?;
        }
    }
    Ok(())
}

/// Runs one race into `dir` and writes its outcome.
fn execute(
    task: &RtlTask,
    roles: &RoleSpecs,
    harness: &SimHarness,
    config: &ParallelConfig,
    role: RunRole,
    run: usize,
    seed: u64,
    dir: &Path,
) -> Result<OutcomeFile, Failure> {
    let io = |e: std::io::Error| Failure::tool(format!("{}: {e}", dir.display()));
    clear_run_dir(dir).map_err(io)?;
    let rd = RunDir::create(dir).map_err(io)?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let t0 = Instant::now();
    let outcome = race(task, roles, harness, config, seed, &rd);
    let timing = RunTiming {
        started_at,
        wall_time: t0.elapsed().as_secs_f64(),
        cancellation_latency: outcome.cancellation_latency,
    };
    let file = OutcomeFile::new(task, &outcome, config, role, run, seed, timing);
    rd.write_outcome(&file, outcome.winning_code.as_deref()).map_err(io)?;
    Ok(file)
}

fn tool_error(outcome: &OutcomeFile) -> Option<&str> {
    if outcome.solved {
        return None;
    }
    outcome.per_process.iter().find_map(|p| p.error.as_deref())
}

fn load_task_or_usage(path: &Path) -> Result<RtlTask, Failure> {
    load_task(path).map_err(|e| match e {
        TaskError::Io { .. } => Failure::usage(e.to_string()),
        _ => Failure::usage(format!("{}: {e}", path.display())),
    })
}

pub fn run(task_path: &Path, mut config: GlobalConfig, flags: &LoopFlags, out: Option<PathBuf>) -> CmdResult {
    flags.apply(&mut config);
    let roles = config.validate_for_run().map_err(|e| Failure::usage(e.to_string()))?.clone();
    let task = load_task_or_usage(task_path)?;
    let harness = harness(&config)?;
    let pc = config.parallel_config();
    let dir = out.unwrap_or_else(|| config.output_root.join(&task.id).join(format!("seed{}", config.seed)));
    let outcome = execute(&task, &roles, &harness, &pc, RunRole::Race, 0, config.seed, &dir)?;
    match (outcome.winner, outcome.iterations_to_success) {
        (Some(w), Some(i)) => {
            println!(
                "{}: solved by process {w} at iteration {i} ({} iterations executed) -> {}",
                task.id,
                outcome.total_iterations_executed,
                dir.display()
            );
            Ok(EXIT_OK)
        }
        _ => {
            println!(
                "{}: unsolved after {} iterations -> {}",
                task.id,
                outcome.total_iterations_executed,
                dir.display()
            );
            match tool_error(&outcome) {
                Some(e) => Err(Failure::tool(format!("{}: {e}", task.id))),
                None => Ok(EXIT_UNSOLVED),
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BenchFlags {
    pub runs: usize,
    pub solo_baseline: bool,
    pub agentic: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct TaskFailure {
    task: String,
    error: String,
}

/// Task bundle directories directly below `suite`, sorted.
pub fn suite_tasks(suite: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = fs::read_dir(suite).map_err(|e| Failure::usage(format!("{}: {e}", suite.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("task.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Removes run directories this bench will not overwrite.
fn remove_stale_runs(task_dir: &Path, runs: usize, solo: bool) -> std::io::Result<()> {
    let Ok(entries) = fs::read_dir(task_dir) else { return Ok(()) };
    for e in entries {
        let p = e?.path();
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let is_solo = name.ends_with("-solo");
        let index = name.strip_prefix("run").map(|r| r.trim_end_matches("-solo"));
        if let Some(Ok(i)) = index.map(str::parse::<usize>) {
            if (i >= runs || is_solo && !solo) && p.is_dir() {
                fs::remove_dir_all(p)?;
            }
        }
    }
    Ok(())
}

fn write_reports(agg: &Aggregate, agentic: bool, out: &Path) -> Result<(), Failure> {
    let mut agg = agg.clone();
    agg.matrix.agentic = agentic;
    let report = agg.report();
    let io = |e: std::io::Error| Failure::tool(format!("{}: {e}", out.display()));
    fs::create_dir_all(out).map_err(io)?;
    fs::write(out.join("report.json"), emit_report(&report, ReportFormat::Json) + "\n").map_err(io)?;
    let md = emit_report(&report, ReportFormat::Markdown);
    fs::write(out.join("report.md"), &md).map_err(io)?;
    print!("{md}");
    Ok(())
}

pub fn bench(suite: &Path, mut config: GlobalConfig, loop_flags: &LoopFlags, flags: &BenchFlags) -> CmdResult {
    loop_flags.apply(&mut config);
    if flags.runs == 0 {
        return Err(Failure::usage("--runs must be at least 1"));
    }
    let roles = config.validate_for_run().map_err(|e| Failure::usage(e.to_string()))?.clone();
    let tasks = suite_tasks(suite)?;
    if tasks.is_empty() {
        return Err(Failure::usage(format!("no task bundles in {}", suite.display())));
    }
    let harness = harness(&config)?;
    let out = flags.out.clone().unwrap_or_else(|| config.output_root.join("bench"));
    let pc = config.parallel_config();
    let solo = ParallelConfig { processes: 1, ..pc.clone() };

    let mut failures = Vec::new();
    for path in &tasks {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let task = match load_task(path) {
            Ok(t) => t,
            Err(e) => {
                tracing::warn!("skipping {name}: {e}");
                failures.push(TaskFailure { task: name, error: e.to_string() });
                continue;
            }
        };
        let task_dir = out.join(&task.id);
        remove_stale_runs(&task_dir, flags.runs, flags.solo_baseline).map_err(|e| Failure::tool(e.to_string()))?;
        for r in 0..flags.runs {
            let seed = config.seed.wrapping_add(r as u64);
            let o = execute(&task, &roles, &harness, &pc, RunRole::Race, r, seed, &task_dir.join(format!("run{r}")))?;
            if let Some(e) = tool_error(&o) {
                failures.push(TaskFailure { task: task.id.clone(), error: format!("run {r}: {e}") });
            }
            if flags.solo_baseline {
                let dir = task_dir.join(format!("run{r}-solo"));
                execute(&task, &roles, &harness, &solo, RunRole::SoloBaseline, r, seed, &dir)?;
            }
            eprintln!("{} run {r}: {}", task.id, if o.solved { "solved" } else { "unsolved" });
        }
    }

    let failures_path = out.join("failures.json");
    if failures.is_empty() {
        let _ = fs::remove_file(&failures_path);
    } else {
        fs::create_dir_all(&out).map_err(|e| Failure::tool(e.to_string()))?;
        let json = serde_json::to_string_pretty(&failures).expect("failures serialize") + "\n";
        fs::write(&failures_path, json).map_err(|e| Failure::tool(e.to_string()))?;
    }
    let agg = aggregate(&out).map_err(|e| Failure::tool(e.to_string()))?;
    for w in &agg.warnings {
        eprintln!("warning: {w}");
    }
    write_reports(&agg, flags.agentic, &out)?;
    Ok(if failures.is_empty() { EXIT_OK } else { EXIT_UNSOLVED })
}

#[derive(Debug, Clone, Default)]
pub struct ForgeFlags {
    pub golden: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct PairRejectionRecord<'a> {
    script_id: &'a str,
    rejection: &'a hdlagent::forge::PairRejection,
}

fn forge_failure(e: ForgeError) -> Failure {
    match e {
        ForgeError::Tool(_) | ForgeError::Io { .. } => Failure::tool(e.to_string()),
        _ => Failure::usage(e.to_string()),
    }
}

pub fn forge(corpus_path: &Path, config: GlobalConfig, flags: &ForgeFlags) -> CmdResult {
    let fc = &config.forge;
    fc.validate().map_err(|e| Failure::usage(e.to_string()))?;
    if !corpus_path.exists() {
        return Err(Failure::usage(format!("corpus {} not found", corpus_path.display())));
    }
    let golden = match &flags.golden {
        Some(g) if g.exists() => load_corpus(g).map_err(forge_failure)?,
        Some(g) if fc.stages.contamination => {
            return Err(Failure::usage(format!("golden directory {} not found", g.display())))
        }
        None if fc.stages.contamination => {
            return Err(Failure::usage("the contamination stage needs --golden"))
        }
        _ => Vec::new(),
    };
    let corpus = load_corpus(corpus_path).map_err(forge_failure)?;
    let harness = SimHarness::new(config.sim.clone());
    let needs_tool = fc.stages.syntax && !corpus.is_empty() || flags.pool.is_some();
    if needs_tool && !config.sim.toolchain_available() {
        return Err(Failure::tool(format!("syntax checker `{}` not found", config.sim.compiler_command)));
    }
    let roles = match &flags.pool {
        Some(_) => Some(config.validate_for_run().map_err(|e| Failure::usage(e.to_string()))?.clone()),
        None => None,
    };

    let cancel = CancelToken::new();
    let (kept, report) = run_pipeline(corpus, &golden, &harness, fc, &cancel).map_err(forge_failure)?;
    let out = flags.out.clone().unwrap_or_else(|| config.output_root.join("forge"));
    let io = |e: std::io::Error| Failure::tool(format!("{}: {e}", out.display()));
    fs::create_dir_all(&out).map_err(io)?;
    write_manifest(&out.join("retained.jsonl"), &kept).map_err(forge_failure)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    fs::write(out.join("filter_report.json"), json).map_err(io)?;
    for s in &report.stages {
        println!("{:?}: input={} rejected={} retained={}", s.stage, s.input, s.rejected, s.retained);
    }
    println!("retained={}", kept.len());

    if let (Some(pool_path), Some(roles)) = (&flags.pool, roles) {
        let pool = ExamplePool::load(pool_path, &harness, &cancel).map_err(forge_failure)?;
        let backend = roles
            .generator
            .build(config.seed)
            .map_err(|e| Failure::usage(format!("generator backend: {e}")))?;
        let index = GoldenIndex::build(golden.iter().map(|g| (g.id.as_str(), g.content.as_str())), fc.granularity);
        let (mut pairs, mut rejected) = (String::new(), String::new());
        let mut accepted = 0;
        for script in &kept {
            let outcome = generate_pairs(script, &pool, backend.as_ref(), &harness, &index, fc, &cancel);
            for p in &outcome.accepted {
                accepted += 1;
                pairs.push_str(&serde_json::to_string(p).expect("pair serializes"));
                pairs.push('\n');
            }
            if let Some(r) = &outcome.rejection {
                let rec = PairRejectionRecord { script_id: &script.id, rejection: r };
                rejected.push_str(&serde_json::to_string(&rec).expect("rejection serializes"));
                rejected.push('\n');
            }
        }
        fs::write(out.join("pairs.jsonl"), pairs).map_err(io)?;
        fs::write(out.join("pair_rejections.jsonl"), rejected).map_err(io)?;
        println!("pairs={accepted}");
    }
    Ok(EXIT_OK)
}

pub fn report(root: &Path, agentic: bool, out: Option<PathBuf>) -> CmdResult {
    let agg = aggregate(root).map_err(|e| Failure::usage(e.to_string()))?;
    for w in &agg.warnings {
        eprintln!("warning: {w}");
    }
    write_reports(&agg, agentic, &out.unwrap_or_else(|| root.to_path_buf()))?;
    Ok(EXIT_OK)
}
