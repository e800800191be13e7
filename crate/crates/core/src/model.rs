//! Tasks, workspaces and trajectories shared by every stage of the loop.
//!
//! A task bundle on disk is a directory holding `task.json` plus the text
//! files it references:
//!
//! ```text
//! adder_spec2rtl/
//!   task.json        {"id", "category", "top_module", "sim_timeout",
//!                     "spec_file", "prior_code_file"?, "testbench_files": [..]}
//!   spec.md
//!   tb_adder.v
//! ```
//!
//! Golden solutions never live inside a bundle; fixtures keep them next to
//! the bundles so that nothing prompt-visible leaks the answer.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reflector::DiagnosticReport;
use crate::sim::SimVerdict;

/// CVDP problem category. Serialized as the benchmark's category id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskCategory {
    #[serde(rename = "cid002")]
    CodeCompletion,
    #[serde(rename = "cid003")]
    SpecToRtl,
    #[serde(rename = "cid004")]
    CodeModification,
    #[serde(rename = "cid016")]
    CodeDebugging,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 4] = [
        TaskCategory::CodeCompletion,
        TaskCategory::SpecToRtl,
        TaskCategory::CodeModification,
        TaskCategory::CodeDebugging,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            TaskCategory::CodeCompletion => "cid002",
            TaskCategory::SpecToRtl => "cid003",
            TaskCategory::CodeModification => "cid004",
            TaskCategory::CodeDebugging => "cid016",
        }
    }

    /// Whether tasks of this category ship a basic or buggy implementation.
    pub fn requires_prior_code(self) -> bool {
        matches!(
            self,
            TaskCategory::CodeModification | TaskCategory::CodeDebugging
        )
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TaskCategory {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskCategory::ALL
            .into_iter()
            .find(|c| c.tag() == s)
            .ok_or_else(|| TaskError::UnknownCategory(s.to_string()))
    }
}

/// A named HDL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub name: String,
    pub content: String,
}

/// One design problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtlTask {
    pub id: String,
    pub category: TaskCategory,
    pub specification: String,
    pub prior_code: Option<String>,
    pub testbench_sources: Vec<SourceFile>,
    pub top_module: String,
    /// Seconds.
    pub sim_timeout: f64,
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed task manifest {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("task manifest is missing field `{0}`")]
    MissingField(String),
    #[error("unknown task category `{0}`")]
    UnknownCategory(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

pub(crate) fn hdl_identifier_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z_][A-Za-z0-9_$]*$").unwrap())
}

fn is_plain_file_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains('/')
        && !name.contains('\\')
        && !name.contains('\0')
}

impl RtlTask {
    /// Checks the task invariants.
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.id.trim().is_empty() {
            return Err(TaskError::SchemaViolation("empty task id".into()));
        }
        let needs_prior = self.category.requires_prior_code();
        match (&self.prior_code, needs_prior) {
            (None, true) => {
                return Err(TaskError::SchemaViolation(format!(
                    "category {} requires prior code",
                    self.category
                )))
            }
            (Some(_), false) => {
                return Err(TaskError::SchemaViolation(format!(
                    "category {} must not carry prior code",
                    self.category
                )))
            }
            _ => {}
        }
        if self.testbench_sources.is_empty() {
            return Err(TaskError::SchemaViolation(
                "at least one testbench file is required".into(),
            ));
        }
        for tb in &self.testbench_sources {
            if !is_plain_file_name(&tb.name) {
                return Err(TaskError::SchemaViolation(format!(
                    "testbench file name `{}` must be a plain file name",
                    tb.name
                )));
            }
        }
        if !hdl_identifier_re().is_match(&self.top_module) {
            return Err(TaskError::SchemaViolation(format!(
                "`{}` is not a valid HDL identifier",
                self.top_module
            )));
        }
        if !(self.sim_timeout.is_finite() && self.sim_timeout > 0.0) {
            return Err(TaskError::SchemaViolation(
                "sim_timeout must be a positive number of seconds".into(),
            ));
        }
        Ok(())
    }
}

/// On-disk form of `task.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskManifest {
    pub id: String,
    pub category: String,
    pub top_module: String,
    pub sim_timeout: f64,
    pub spec_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_code_file: Option<String>,
    pub testbench_files: Vec<String>,
}

const REQUIRED_FIELDS: [&str; 6] = [
    "id",
    "category",
    "top_module",
    "sim_timeout",
    "spec_file",
    "testbench_files",
];

fn read_text(path: &Path) -> Result<String, TaskError> {
    fs::read_to_string(path).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads and validates a task bundle. `path` may name the bundle directory
/// or its `task.json`.
pub fn load_task(path: impl AsRef<Path>) -> Result<RtlTask, TaskError> {
    let path = path.as_ref();
    let (dir, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join("task.json"))
    } else {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        (dir, path.to_path_buf())
    };
    let raw = read_text(&manifest_path)?;
    let value: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| TaskError::Malformed {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
    let obj = value.as_object().ok_or_else(|| TaskError::Malformed {
        path: manifest_path.clone(),
        message: "expected a JSON object".into(),
    })?;
    for field in REQUIRED_FIELDS {
        if obj.get(field).map_or(true, |v| v.is_null()) {
            return Err(TaskError::MissingField(field.to_string()));
        }
    }
    let manifest: TaskManifest =
        serde_json::from_value(value).map_err(|e| TaskError::Malformed {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;

    let category: TaskCategory = manifest.category.parse()?;
    for name in std::iter::once(&manifest.spec_file)
        .chain(manifest.prior_code_file.iter())
        .chain(manifest.testbench_files.iter())
    {
        if !is_plain_file_name(name) {
            return Err(TaskError::SchemaViolation(format!(
                "referenced file `{name}` must live inside the bundle"
            )));
        }
    }
    let specification = read_text(&dir.join(&manifest.spec_file))?;
    let prior_code = manifest
        .prior_code_file
        .as_ref()
        .map(|f| read_text(&dir.join(f)))
        .transpose()?;
    let testbench_sources = manifest
        .testbench_files
        .iter()
        .map(|name| {
            Ok(SourceFile {
                name: name.clone(),
                content: read_text(&dir.join(name))?,
            })
        })
        .collect::<Result<Vec<_>, TaskError>>()?;

    let task = RtlTask {
        id: manifest.id,
        category,
        specification,
        prior_code,
        testbench_sources,
        top_module: manifest.top_module,
        sim_timeout: manifest.sim_timeout,
    };
    task.validate()?;
    Ok(task)
}

/// Writes `task` as a bundle into `dir` (created if missing).
pub fn save_task(task: &RtlTask, dir: impl AsRef<Path>) -> Result<(), TaskError> {
    task.validate()?;
    let dir = dir.as_ref();
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TaskError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, content: &str| {
        let p = dir.join(name);
        fs::write(&p, content).map_err(io_err(&p))
    };
    let prior_code_file = task.prior_code.as_ref().map(|_| "prior.v".to_string());
    let manifest = TaskManifest {
        id: task.id.clone(),
        category: task.category.tag().to_string(),
        top_module: task.top_module.clone(),
        sim_timeout: task.sim_timeout,
        spec_file: "spec.md".into(),
        prior_code_file: prior_code_file.clone(),
        testbench_files: task.testbench_sources.iter().map(|t| t.name.clone()).collect(),
    };
    if manifest
        .testbench_files
        .iter()
        .any(|n| n == "spec.md" || n == "task.json" || Some(n) == prior_code_file.as_ref())
    {
        return Err(TaskError::SchemaViolation(
            "testbench file name collides with a bundle file".into(),
        ));
    }
    write("spec.md", &task.specification)?;
    if let (Some(name), Some(code)) = (&prior_code_file, &task.prior_code) {
        write(name, code)?;
    }
    for tb in &task.testbench_sources {
        write(&tb.name, &tb.content)?;
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write("task.json", &(json + "\n"))
}

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("candidate code is empty")]
    InvalidCandidate,
    #[error("file name `{0}` is used by both the candidate and a testbench")]
    NameCollision(String),
    #[error("path `{0}` escapes the workspace root")]
    OutsideRoot(String),
    #[error("workspace I/O failed at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// An isolated directory holding one candidate plus its testbench.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    files: BTreeMap<String, String>,
    created_at: DateTime<Utc>,
    dut_file: String,
    testbench_files: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct WorkspaceManifest<'a> {
    task_id: &'a str,
    top_module: &'a str,
    dut_file: &'a str,
    testbench_files: &'a [String],
}

static WORKSPACE_COUNTER: AtomicU64 = AtomicU64::new(0);

fn unique_root(scratch_root: &Path) -> Result<PathBuf, WorkspaceError> {
    fs::create_dir_all(scratch_root).map_err(|source| WorkspaceError::Io {
        path: scratch_root.to_path_buf(),
        source,
    })?;
    loop {
        let n = WORKSPACE_COUNTER.fetch_add(1, Ordering::Relaxed);
        let suffix: u32 = rand::thread_rng().gen();
        let root = scratch_root.join(format!("ws-{}-{n}-{suffix:08x}", std::process::id()));
        match fs::create_dir(&root) {
            Ok(()) => return Ok(root),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(source) => return Err(WorkspaceError::Io { path: root, source }),
        }
    }
}

/// Creates a fresh workspace under `scratch_root` with the candidate written
/// as `<top_module>.v`, every testbench source, and a manifest.
pub fn materialize_workspace(
    task: &RtlTask,
    candidate_code: &str,
    scratch_root: &Path,
) -> Result<Workspace, WorkspaceError> {
    if candidate_code.trim().is_empty() {
        return Err(WorkspaceError::InvalidCandidate);
    }
    let dut_file = format!("{}.v", task.top_module);
    for tb in &task.testbench_sources {
        if tb.name == dut_file || tb.name == MANIFEST_FILE {
            return Err(WorkspaceError::NameCollision(tb.name.clone()));
        }
    }
    let root = unique_root(scratch_root)?;
    let testbench_files: Vec<String> =
        task.testbench_sources.iter().map(|t| t.name.clone()).collect();
    let mut ws = Workspace {
        root,
        files: BTreeMap::new(),
        created_at: Utc::now(),
        dut_file: dut_file.clone(),
        testbench_files,
    };
    ws.write_file(&dut_file, candidate_code)?;
    for tb in &task.testbench_sources {
        ws.write_file(&tb.name, &tb.content)?;
    }
    let manifest = WorkspaceManifest {
        task_id: &task.id,
        top_module: &task.top_module,
        dut_file: &dut_file,
        testbench_files: &ws.testbench_files,
    };
    let manifest = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    ws.write_file(MANIFEST_FILE, &manifest)?;
    Ok(ws)
}

impl Workspace {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }

    pub fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }

    /// Resolves `name` under the root, refusing anything that would escape it.
    pub fn path_of(&self, name: &str) -> Result<PathBuf, WorkspaceError> {
        let rel = Path::new(name);
        let confined = !name.is_empty()
            && rel.components().all(|c| matches!(c, std::path::Component::Normal(_)));
        if !confined {
            return Err(WorkspaceError::OutsideRoot(name.to_string()));
        }
        Ok(self.root.join(rel))
    }

    pub fn write_file(&mut self, name: &str, content: &str) -> Result<(), WorkspaceError> {
        let path = self.path_of(name)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| WorkspaceError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        fs::write(&path, content).map_err(|source| WorkspaceError::Io { path, source })?;
        self.files.insert(name.to_string(), content.to_string());
        Ok(())
    }

    /// HDL sources in compile order: the candidate first, then testbenches.
    pub fn hdl_sources(&self) -> Vec<PathBuf> {
        std::iter::once(&self.dut_file)
            .chain(self.testbench_files.iter())
            .filter(|n| n.ends_with(".v") || n.ends_with(".sv"))
            .map(|n| self.root.join(n))
            .collect()
    }

    /// `(name, content)` of every HDL source, in compile order.
    pub fn hdl_contents(&self) -> Vec<(&str, &str)> {
        std::iter::once(&self.dut_file)
            .chain(self.testbench_files.iter())
            .filter(|n| n.ends_with(".v") || n.ends_with(".sv"))
            .filter_map(|n| self.files.get(n).map(|c| (n.as_str(), c.as_str())))
            .collect()
    }

    /// Deletes the directory after a passing run unless `keep` is set.
    /// Failing workspaces are always retained for post-mortem.
    pub fn dispose(self, success: bool, keep: bool) -> io::Result<()> {
        if success && !keep {
            fs::remove_dir_all(&self.root)?;
        }
        Ok(())
    }
}

/// How the Generator is asked to produce the next candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptKind {
    /// First attempt: specification only.
    Fresh,
    /// Refine using the evolving debugging context.
    Repair,
    /// Regenerate from scratch, guided only by distilled insights.
    Restart,
}

/// One Generator -> simulator -> Reflector cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub index: usize,
    pub attempt_kind: AttemptKind,
    pub generated_code: String,
    pub verdict: SimVerdict,
    pub diagnostic: Option<DiagnosticReport>,
    /// The candidate of this iteration was produced right after a restart.
    pub restarted: bool,
    /// Seconds.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrajectoryOutcome {
    Solved { at_iteration: usize },
    Exhausted,
    Cancelled,
}

impl TrajectoryOutcome {
    /// Derives the outcome from the records alone: the first passing record
    /// solves; a full budget or a tool failure exhausts; anything shorter
    /// was cut off by cancellation.
    pub fn from_records(records: &[IterationRecord], max_iterations: usize) -> Self {
        if let Some(r) = records.iter().find(|r| r.verdict.is_pass()) {
            return TrajectoryOutcome::Solved {
                at_iteration: r.index,
            };
        }
        let tool_failed = records
            .last()
            .is_some_and(|r| matches!(r.verdict, SimVerdict::ToolError(_)));
        if records.len() >= max_iterations || tool_failed {
            TrajectoryOutcome::Exhausted
        } else {
            TrajectoryOutcome::Cancelled
        }
    }

    pub fn solved_at(&self) -> Option<usize> {
        match self {
            TrajectoryOutcome::Solved { at_iteration } => Some(*at_iteration),
            _ => None,
        }
    }
}

/// The full history of one loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub process_id: usize,
    pub records: Vec<IterationRecord>,
    pub outcome: TrajectoryOutcome,
    pub restart_count: usize,
    /// Set when a tool or gateway failure ended the loop early.
    pub error: Option<String>,
}

impl Trajectory {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }
}
