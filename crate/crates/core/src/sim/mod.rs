//! Compile and simulate candidates with an external HDL toolchain and turn
//! the logs into structured feedback.
//!
//! Two toolchains are supported. Icarus Verilog (`iverilog` + `vvp`) is the
//! default. Verilator (`verilator --timing` + `make`) is used when
//! `iverilog` is absent or `HDLAGENT_SIMULATOR=verilator` is set.
//!
//! | variable                 | meaning                               |
//! |--------------------------|---------------------------------------|
//! | `HDLAGENT_SIMULATOR`     | `icarus` or `verilator`               |
//! | `HDLAGENT_IVERILOG`      | path of `iverilog`                    |
//! | `HDLAGENT_VVP`           | path of `vvp`                         |
//! | `HDLAGENT_VERILATOR`     | path of `verilator`                   |
//! | `HDLAGENT_MAKE`          | path of `make` (Verilator builds)     |

mod feedback;
mod parse;
pub mod process;
mod toolchain;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cancel::CancelToken;
use crate::model::{materialize_workspace, RtlTask, Workspace, WorkspaceError};

pub use feedback::{FailureClass, SignalMismatch, SimVerdict, StructuredFeedback};
pub use parse::{
    format_tb_fail, parse_log, parse_log_with_limit, parse_tb_fail, truncate_log, ExitInfo,
    LogOutcome, DEFAULT_MAX_LOG_BYTES, PASS_MARKER,
};
pub use process::ProcessTracker;

use process::{run_command, RunEnd};

/// Raw simulator output is captured up to this many bytes before truncation.
const RAW_CAPTURE_LIMIT: usize = 4 << 20;
pub const SIM_LOG_FILE: &str = "sim.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolchainKind {
    Icarus,
    Verilator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub toolchain: ToolchainKind,
    /// `iverilog` or `verilator`.
    pub compiler_command: String,
    /// `vvp` for Icarus; the `make` used to build Verilator models.
    pub runtime_command: String,
    pub extra_flags: Vec<String>,
    /// Seconds.
    pub compile_timeout: f64,
    /// Seconds; a task's own limit takes precedence in [`SimHarness::verify`].
    pub sim_timeout: f64,
    pub max_log_bytes: usize,
    /// Content-addressed compile cache; `None` disables it.
    pub cache_dir: Option<PathBuf>,
    /// Parent directory of every workspace.
    pub scratch_root: PathBuf,
    /// Keep passing workspaces too (failing ones are always kept).
    pub keep_workspaces: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            toolchain: ToolchainKind::Icarus,
            compiler_command: "iverilog".into(),
            runtime_command: "vvp".into(),
            extra_flags: Vec::new(),
            compile_timeout: 120.0,
            sim_timeout: 30.0,
            max_log_bytes: DEFAULT_MAX_LOG_BYTES,
            cache_dir: Some(std::env::temp_dir().join("hdlagent-cache")),
            scratch_root: std::env::temp_dir().join("hdlagent-scratch"),
            keep_workspaces: false,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("max_log_bytes must be at least 4096, got {0}")]
    LogLimit(usize),
}

fn which(program: &str) -> Option<PathBuf> {
    if program.contains('/') {
        let p = PathBuf::from(program);
        return p.is_file().then_some(p);
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|dir| dir.join(program))
            .find(|p| p.is_file())
    })
}

impl SimConfig {
    pub fn icarus() -> Self {
        Self::default()
    }

    pub fn verilator() -> Self {
        Self {
            toolchain: ToolchainKind::Verilator,
            compiler_command: "verilator".into(),
            runtime_command: "make".into(),
            ..Self::default()
        }
    }

    /// Picks a toolchain from the environment: explicit overrides first,
    /// then Icarus if `iverilog` is on `PATH`, then Verilator.
    pub fn detect() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let iverilog = var("HDLAGENT_IVERILOG").unwrap_or_else(|| "iverilog".into());
        let verilator = var("HDLAGENT_VERILATOR").unwrap_or_else(|| "verilator".into());
        let kind = match var("HDLAGENT_SIMULATOR").as_deref() {
            Some("verilator") => ToolchainKind::Verilator,
            Some(_) => ToolchainKind::Icarus,
            None if which(&iverilog).is_some() => ToolchainKind::Icarus,
            None if which(&verilator).is_some() => ToolchainKind::Verilator,
            None => ToolchainKind::Icarus,
        };
        match kind {
            ToolchainKind::Icarus => Self {
                compiler_command: iverilog,
                runtime_command: var("HDLAGENT_VVP").unwrap_or_else(|| "vvp".into()),
                ..Self::icarus()
            },
            ToolchainKind::Verilator => Self {
                compiler_command: verilator,
                runtime_command: var("HDLAGENT_MAKE").unwrap_or_else(|| "make".into()),
                ..Self::verilator()
            },
        }
    }

    /// Whether the configured compiler can be found.
    pub fn toolchain_available(&self) -> bool {
        which(&self.compiler_command).is_some()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.compile_timeout > 0.0) {
            return Err(ConfigError::NonPositive("compile_timeout"));
        }
        if !(self.sim_timeout > 0.0) {
            return Err(ConfigError::NonPositive("sim_timeout"));
        }
        if self.max_log_bytes < 4096 {
            return Err(ConfigError::LogLimit(self.max_log_bytes));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("tool error: {0}")]
    ToolError(String),
    #[error("{phase} exceeded {seconds} s")]
    Timeout { phase: &'static str, seconds: f64 },
    #[error("cancelled")]
    Cancelled,
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

/// A compiled simulation and the directory it must run in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub path: PathBuf,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompileOutcome {
    Artifact(Artifact),
    Failed(StructuredFeedback),
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Log truncated to `max_log_bytes`.
    pub log: String,
    /// Everything captured (bounded); this is what gets parsed.
    pub raw_log: String,
    pub exit: ExitInfo,
    pub truncated: bool,
}

/// Anything that can judge a candidate against a task.
pub trait Verifier: Send + Sync {
    fn verify(&self, task: &RtlTask, candidate: &str, cancel: &CancelToken) -> SimVerdict;
}

/// Stateless apart from its configuration and a record of spawned process
/// groups; safe to share across threads as long as each call gets its own
/// workspace.
#[derive(Debug, Clone)]
pub struct SimHarness {
    config: SimConfig,
    tracker: Arc<ProcessTracker>,
}

impl SimHarness {
    pub fn new(config: SimConfig) -> Self {
        Self {
            config,
            tracker: Arc::new(ProcessTracker::new()),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn tracker(&self) -> &Arc<ProcessTracker> {
        &self.tracker
    }

    fn run(
        &self,
        cmd: std::process::Command,
        timeout: f64,
        cancel: &CancelToken,
        capture: usize,
    ) -> Result<process::RunOutput, SimError> {
        let program = format!("{:?}", cmd.get_program());
        run_command(
            cmd,
            Duration::from_secs_f64(timeout),
            cancel,
            Some(&self.tracker),
            capture,
        )
        .map_err(|e| SimError::ToolError(format!("cannot run {program}: {e}")))
    }

    /// Compiles every HDL source of `ws`. Compiler diagnostics come back as
    /// `Failed` feedback; a missing compiler or a hung build is an error.
    pub fn compile(&self, ws: &Workspace, cancel: &CancelToken) -> Result<CompileOutcome, SimError> {
        if ws.hdl_sources().is_empty() {
            return Err(SimError::ToolError("workspace has no HDL sources".into()));
        }
        toolchain::compile(self, ws, cancel)
    }

    /// Runs a compiled artifact and captures its log; the full log is
    /// persisted as `sim.log` next to the artifact's working directory.
    pub fn simulate(
        &self,
        artifact: &Artifact,
        timeout: f64,
        cancel: &CancelToken,
    ) -> Result<SimOutput, SimError> {
        let cmd = toolchain::simulate_command(&self.config, artifact);
        let out = self.run(cmd, timeout, cancel, RAW_CAPTURE_LIMIT)?;
        let exit = match out.end {
            RunEnd::Exited(status) => ExitInfo {
                status,
                timed_out: false,
            },
            RunEnd::TimedOut => ExitInfo::timeout(),
            RunEnd::Cancelled => return Err(SimError::Cancelled),
        };
        let mut raw_log = out.output;
        if out.dropped > 0 {
            raw_log.push_str(&format!("\n... [{} bytes not captured] ...\n", out.dropped));
        }
        let _ = fs::write(artifact.workdir.join(SIM_LOG_FILE), &raw_log);
        let log = truncate_log(&raw_log, self.config.max_log_bytes);
        Ok(SimOutput {
            truncated: log.len() < raw_log.len(),
            log,
            raw_log,
            exit,
        })
    }

    /// Compile-only check of one source file. `Ok(None)` means it compiled;
    /// references to modules defined elsewhere are not syntax errors.
    pub fn check_syntax(
        &self,
        source: &str,
        cancel: &CancelToken,
    ) -> Result<Option<StructuredFeedback>, SimError> {
        toolchain::check_syntax(self, source, cancel)
    }

    fn verify_in(&self, ws: &Workspace, timeout: f64, cancel: &CancelToken) -> SimVerdict {
        let artifact = match self.compile(ws, cancel) {
            Ok(CompileOutcome::Artifact(a)) => a,
            Ok(CompileOutcome::Failed(fb)) => return SimVerdict::CompileError(fb),
            Err(e) => return error_verdict(e),
        };
        let out = match self.simulate(&artifact, timeout, cancel) {
            Ok(o) => o,
            Err(e) => return error_verdict(e),
        };
        match parse_log_with_limit(&out.raw_log, out.exit, self.config.max_log_bytes) {
            LogOutcome::Pass => SimVerdict::Pass,
            LogOutcome::Feedback(fb) => match fb.failure_class {
                FailureClass::Timeout => SimVerdict::Timeout(fb),
                FailureClass::CompileError => SimVerdict::CompileError(fb),
                _ => SimVerdict::Fail(fb),
            },
        }
    }
}

fn error_verdict(e: SimError) -> SimVerdict {
    match e {
        SimError::Timeout { phase, seconds } => SimVerdict::Timeout(StructuredFeedback::new(
            FailureClass::Timeout,
            format!("{phase} exceeded {seconds} s"),
        )),
        other => SimVerdict::ToolError(other.to_string()),
    }
}

impl Verifier for SimHarness {
    /// materialize -> compile -> simulate -> parse.
    fn verify(&self, task: &RtlTask, candidate: &str, cancel: &CancelToken) -> SimVerdict {
        let ws = match materialize_workspace(task, candidate, &self.config.scratch_root) {
            Ok(ws) => ws,
            Err(WorkspaceError::InvalidCandidate) => {
                return SimVerdict::CompileError(StructuredFeedback::new(
                    FailureClass::CompileError,
                    "candidate code is empty",
                ))
            }
            Err(e) => return SimVerdict::ToolError(e.to_string()),
        };
        let verdict = self.verify_in(&ws, task.sim_timeout, cancel);
        if let Err(e) = ws.dispose(verdict.is_pass(), self.config.keep_workspaces) {
            tracing::warn!("could not remove workspace: {e}");
        }
        verdict
    }
}

/// Passes any candidate containing `marker`; everything else fails with a
/// fixed mismatch on `signal`. No simulator involved, useful for dry runs
/// and tests of the loop itself.
#[derive(Debug, Clone)]
pub struct MarkerVerifier {
    pub marker: String,
    pub signal: String,
}

impl MarkerVerifier {
    pub fn new(marker: impl Into<String>) -> Self {
        Self {
            marker: marker.into(),
            signal: "out".into(),
        }
    }
}

impl Verifier for MarkerVerifier {
    fn verify(&self, _task: &RtlTask, candidate: &str, cancel: &CancelToken) -> SimVerdict {
        if cancel.is_cancelled() {
            return SimVerdict::ToolError(SimError::Cancelled.to_string());
        }
        if candidate.contains(&self.marker) {
            return SimVerdict::Pass;
        }
        let line = format!("TB_FAIL signal={} time=10 expected=1 actual=0", self.signal);
        let mut fb = StructuredFeedback::new(FailureClass::OutputMismatch, line.clone());
        fb.mismatches.push(SignalMismatch {
            signal: self.signal.clone(),
            time: Some(10),
            expected: "1".into(),
            actual: "0".into(),
        });
        fb.log_excerpt = line;
        SimVerdict::Fail(fb)
    }
}

/// First line that looks like an error, else the first non-empty line.
fn first_error_line(log: &str) -> String {
    log.lines()
        .find(|l| l.to_ascii_lowercase().contains("error"))
        .or_else(|| log.lines().find(|l| !l.trim().is_empty()))
        .unwrap_or("compilation failed")
        .trim()
        .to_string()
}

pub(crate) fn compile_failure(log: &str, max_log_bytes: usize) -> StructuredFeedback {
    let mut fb = StructuredFeedback::new(FailureClass::CompileError, first_error_line(log));
    fb.log_excerpt = truncate_log(log, max_log_bytes);
    fb
}

pub(crate) fn default_cache_root(config: &SimConfig) -> PathBuf {
    config
        .cache_dir
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join("hdlagent-cache"))
}

pub(crate) fn artifact_name(kind: ToolchainKind) -> &'static str {
    match kind {
        ToolchainKind::Icarus => "sim.vvp",
        ToolchainKind::Verilator => "Vsim",
    }
}

pub(crate) fn copy_executable(from: &Path, to: &Path) -> std::io::Result<()> {
    if let Some(parent) = to.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::copy(from, to).map(|_| ())
}
