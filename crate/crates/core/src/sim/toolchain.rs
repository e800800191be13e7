//! Toolchain-specific command lines plus the compile cache.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::process::RunEnd;
use super::{
    artifact_name, compile_failure, copy_executable, default_cache_root, Artifact,
    CompileOutcome, SimConfig, SimError, SimHarness, StructuredFeedback, ToolchainKind,
};
use crate::cancel::CancelToken;
use crate::model::Workspace;

const VERILATOR_DIR: &str = "obj_dir";
const VERILATOR_PREFIX: &str = "Vsim";
const DEFAULT_VERILATOR_CXXFLAGS: &str = "--std=c++20 -DVL_TIME_CONTEXT";
const TOOL_CAPTURE_LIMIT: usize = 1 << 20;

fn verilator_cxxflags() -> String {
    std::env::var("HDLAGENT_VERILATOR_CXXFLAGS")
        .unwrap_or_else(|_| DEFAULT_VERILATOR_CXXFLAGS.to_string())
}

fn verilator_frontend_args(config: &SimConfig) -> Vec<String> {
    let mut args: Vec<String> = [
        "--timing",
        "-Wno-fatal",
        "-Wno-lint",
        "-Wno-style",
        "-Wno-TIMESCALEMOD",
        "--timescale",
        "1ns/1ps",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    args.extend(config.extra_flags.iter().cloned());
    args
}

/// Serializes concurrent compiles of identical inputs so only one of them
/// does the work.
fn key_lock(key: &str) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<String, Arc<Mutex<()>>>>> = OnceLock::new();
    LOCKS
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry(key.to_string())
        .or_default()
        .clone()
}

fn cache_key(config: &SimConfig, sources: &[(&str, &str)]) -> String {
    let mut h = Sha256::new();
    h.update(b"hdlagent-compile-v1\0");
    h.update(format!("{:?}\0{}\0", config.toolchain, config.compiler_command));
    for f in &config.extra_flags {
        h.update(f.as_bytes());
        h.update(b"\0");
    }
    for (name, content) in sources {
        h.update(name.as_bytes());
        h.update(b"\0");
        h.update((content.len() as u64).to_le_bytes());
        h.update(content.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
enum CachedCompile {
    Ok,
    Failed { feedback: StructuredFeedback },
}

fn artifact_for(config: &SimConfig, ws: &Workspace) -> Artifact {
    let path = match config.toolchain {
        ToolchainKind::Icarus => ws.root().join(artifact_name(config.toolchain)),
        ToolchainKind::Verilator => ws
            .root()
            .join(VERILATOR_DIR)
            .join(artifact_name(config.toolchain)),
    };
    Artifact {
        path,
        workdir: ws.root().to_path_buf(),
    }
}

pub(super) fn compile(
    harness: &SimHarness,
    ws: &Workspace,
    cancel: &CancelToken,
) -> Result<CompileOutcome, SimError> {
    let config = &harness.config;
    if !super::which(&config.compiler_command).is_some() {
        return Err(SimError::ToolError(format!(
            "compiler `{}` not found",
            config.compiler_command
        )));
    }
    let artifact = artifact_for(config, ws);
    let Some(cache_root) = config.cache_dir.as_ref() else {
        return compile_uncached(harness, ws, &artifact, cancel);
    };

    let key = cache_key(config, &ws.hdl_contents());
    let entry = cache_root.join("compile").join(&key);
    let lock = key_lock(&key);
    let _guard = lock.lock().unwrap();

    if let Ok(meta) = fs::read_to_string(entry.join("result.json")) {
        if let Ok(cached) = serde_json::from_str::<CachedCompile>(&meta) {
            match cached {
                CachedCompile::Failed { feedback } => return Ok(CompileOutcome::Failed(feedback)),
                CachedCompile::Ok => {
                    let stored = entry.join(artifact_name(config.toolchain));
                    if copy_executable(&stored, &artifact.path).is_ok() {
                        return Ok(CompileOutcome::Artifact(artifact));
                    }
                }
            }
        }
    }

    let outcome = compile_uncached(harness, ws, &artifact, cancel)?;
    let record = match &outcome {
        CompileOutcome::Artifact(a) => {
            let tmp = cache_root.join("compile").join(format!(
                ".{key}.{}.tmp",
                std::process::id()
            ));
            let _ = fs::remove_dir_all(&tmp);
            let stored = fs::create_dir_all(&tmp)
                .and_then(|_| copy_executable(&a.path, &tmp.join(artifact_name(config.toolchain))))
                .and_then(|_| {
                    fs::write(
                        tmp.join("result.json"),
                        serde_json::to_string(&CachedCompile::Ok).unwrap(),
                    )
                });
            Some((tmp, stored))
        }
        CompileOutcome::Failed(fb) => {
            let tmp = cache_root.join("compile").join(format!(
                ".{key}.{}.tmp",
                std::process::id()
            ));
            let _ = fs::remove_dir_all(&tmp);
            let stored = fs::create_dir_all(&tmp).and_then(|_| {
                fs::write(
                    tmp.join("result.json"),
                    serde_json::to_string(&CachedCompile::Failed {
                        feedback: fb.clone(),
                    })
                    .unwrap(),
                )
            });
            Some((tmp, stored))
        }
    };
    if let Some((tmp, Ok(()))) = record {
        let _ = fs::remove_dir_all(&entry);
        if fs::rename(&tmp, &entry).is_err() {
            let _ = fs::remove_dir_all(&tmp);
        }
    }
    Ok(outcome)
}

fn remaining(start: Instant, total: f64) -> Result<f64, SimError> {
    let left = total - start.elapsed().as_secs_f64();
    if left <= 0.0 {
        Err(SimError::Timeout {
            phase: "compilation",
            seconds: total,
        })
    } else {
        Ok(left)
    }
}

/// Runs one build step and maps its end state.
fn build_step(
    harness: &SimHarness,
    cmd: Command,
    timeout: f64,
    cancel: &CancelToken,
) -> Result<(bool, String), SimError> {
    let total = harness.config.compile_timeout;
    let out = harness.run(cmd, timeout, cancel, TOOL_CAPTURE_LIMIT)?;
    match out.end {
        RunEnd::Exited(status) => Ok((status == Some(0), out.output)),
        RunEnd::TimedOut => Err(SimError::Timeout {
            phase: "compilation",
            seconds: total,
        }),
        RunEnd::Cancelled => Err(SimError::Cancelled),
    }
}

fn compile_uncached(
    harness: &SimHarness,
    ws: &Workspace,
    artifact: &Artifact,
    cancel: &CancelToken,
) -> Result<CompileOutcome, SimError> {
    let config = &harness.config;
    let start = Instant::now();
    let sources: Vec<String> = ws
        .hdl_contents()
        .iter()
        .map(|(name, _)| name.to_string())
        .collect();
    match config.toolchain {
        ToolchainKind::Icarus => {
            let mut cmd = Command::new(&config.compiler_command);
            cmd.current_dir(ws.root())
                .arg("-g2012")
                .arg("-o")
                .arg(&artifact.path)
                .args(&config.extra_flags)
                .args(&sources);
            let (ok, log) = build_step(harness, cmd, remaining(start, config.compile_timeout)?, cancel)?;
            if ok && artifact.path.is_file() {
                Ok(CompileOutcome::Artifact(artifact.clone()))
            } else {
                Ok(CompileOutcome::Failed(compile_failure(&log, config.max_log_bytes)))
            }
        }
        ToolchainKind::Verilator => {
            let mut cmd = Command::new(&config.compiler_command);
            cmd.current_dir(ws.root())
                .args(["--cc", "--exe", "--main"])
                .args(verilator_frontend_args(config))
                .args(["--Mdir", VERILATOR_DIR, "--prefix", VERILATOR_PREFIX])
                .args(&sources);
            let (ok, log) = build_step(harness, cmd, remaining(start, config.compile_timeout)?, cancel)?;
            if !ok {
                return Ok(CompileOutcome::Failed(compile_failure(&log, config.max_log_bytes)));
            }
            let obj_dir = ws.root().join(VERILATOR_DIR);
            let runtime = verilator_runtime(harness, cancel)?;
            install_runtime(&runtime, &obj_dir)
                .map_err(|e| SimError::ToolError(format!("cannot stage verilator runtime: {e}")))?;
            let cmd = make_command(config, &obj_dir, true);
            let (ok, log) = build_step(harness, cmd, remaining(start, config.compile_timeout)?, cancel)?;
            if ok && artifact.path.is_file() {
                Ok(CompileOutcome::Artifact(artifact.clone()))
            } else {
                Ok(CompileOutcome::Failed(compile_failure(&log, config.max_log_bytes)))
            }
        }
    }
}

fn make_command(config: &SimConfig, obj_dir: &Path, fast: bool) -> Command {
    let mut cmd = Command::new(&config.runtime_command);
    cmd.arg("-s")
        .arg("-C")
        .arg(obj_dir)
        .arg("-f")
        .arg(format!("{VERILATOR_PREFIX}.mk"))
        .env("CXXFLAGS", verilator_cxxflags());
    if fast {
        cmd.args(["OPT_FAST=-O0", "OPT_SLOW=-O0", "OPT_GLOBAL=-O0"]);
    }
    cmd
}

fn runtime_objects(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("verilated") && (name.ends_with(".o") || name.ends_with(".d"))
        })
        .collect();
    v.sort();
    Ok(v)
}

fn install_runtime(runtime: &Path, obj_dir: &Path) -> std::io::Result<()> {
    let now = SystemTime::now();
    for src in runtime_objects(runtime)? {
        let dst = obj_dir.join(src.file_name().unwrap());
        fs::copy(&src, &dst)?;
        fs::File::options().write(true).open(&dst)?.set_modified(now)?;
    }
    Ok(())
}

/// Verilator rebuilds its support library in every model directory. Build
/// it once per installation and reuse the objects.
fn verilator_runtime(harness: &SimHarness, cancel: &CancelToken) -> Result<PathBuf, SimError> {
    static BUILD_LOCK: Mutex<()> = Mutex::new(());
    let config = &harness.config;
    let _guard = BUILD_LOCK.lock().unwrap();

    let mut version_cmd = Command::new(&config.compiler_command);
    version_cmd.arg("--version");
    let (_, version) = build_step(harness, version_cmd, 60.0, cancel)?;
    let mut h = Sha256::new();
    h.update(config.compiler_command.as_bytes());
    h.update(version.as_bytes());
    h.update(verilator_cxxflags().as_bytes());
    let tag = hex::encode(&h.finalize()[..8]);
    let dir = default_cache_root(config).join(format!("verilator-runtime-{tag}"));
    if dir.join("ready").is_file() {
        return Ok(dir);
    }

    let build = default_cache_root(config).join(format!(
        ".verilator-runtime-{tag}.{}.build",
        std::process::id()
    ));
    let _ = fs::remove_dir_all(&build);
    fs::create_dir_all(&build).map_err(|e| SimError::ToolError(e.to_string()))?;
    fs::write(build.join("rt.v"), "module rt;\n  initial begin #1; $finish; end\nendmodule\n")
        .map_err(|e| SimError::ToolError(e.to_string()))?;
    let mut cmd = Command::new(&config.compiler_command);
    cmd.current_dir(&build)
        .args(["--cc", "--exe", "--main"])
        .args(verilator_frontend_args(config))
        .args(["--Mdir", VERILATOR_DIR, "--prefix", VERILATOR_PREFIX, "rt.v"]);
    let timeout = config.compile_timeout.max(300.0);
    let (ok, log) = build_step(harness, cmd, timeout, cancel)?;
    if !ok {
        return Err(SimError::ToolError(format!("verilator runtime build failed: {log}")));
    }
    let obj_dir = build.join(VERILATOR_DIR);
    let (ok, log) = build_step(harness, make_command(config, &obj_dir, false), timeout, cancel)?;
    if !ok {
        return Err(SimError::ToolError(format!("verilator runtime build failed: {log}")));
    }
    let staged = build.join("runtime");
    fs::create_dir_all(&staged).map_err(|e| SimError::ToolError(e.to_string()))?;
    for obj in runtime_objects(&obj_dir).map_err(|e| SimError::ToolError(e.to_string()))? {
        fs::copy(&obj, staged.join(obj.file_name().unwrap()))
            .map_err(|e| SimError::ToolError(e.to_string()))?;
    }
    fs::write(staged.join("ready"), version).map_err(|e| SimError::ToolError(e.to_string()))?;
    let _ = fs::remove_dir_all(&dir);
    fs::rename(&staged, &dir).map_err(|e| SimError::ToolError(e.to_string()))?;
    let _ = fs::remove_dir_all(&build);
    Ok(dir)
}

pub(super) fn simulate_command(config: &SimConfig, artifact: &Artifact) -> Command {
    match config.toolchain {
        ToolchainKind::Icarus => {
            let mut cmd = Command::new(&config.runtime_command);
            cmd.current_dir(&artifact.workdir).arg("-n").arg(&artifact.path);
            cmd
        }
        ToolchainKind::Verilator => {
            let mut cmd = Command::new(&artifact.path);
            // The run summary carries wall-clock figures; keep logs reproducible.
            cmd.current_dir(&artifact.workdir).arg("+verilator+quiet");
            cmd
        }
    }
}

fn is_missing_module(line: &str) -> bool {
    let l = line.to_ascii_lowercase();
    l.contains("unknown module type") || l.contains("cannot find file containing module")
}

fn is_summary(line: &str) -> bool {
    let l = line.to_ascii_lowercase();
    l.contains("error(s) during elaboration") || l.contains("exiting due to")
}

pub(super) fn check_syntax(
    harness: &SimHarness,
    source: &str,
    cancel: &CancelToken,
) -> Result<Option<StructuredFeedback>, SimError> {
    let config = &harness.config;
    if super::which(&config.compiler_command).is_none() {
        return Err(SimError::ToolError(format!(
            "compiler `{}` not found",
            config.compiler_command
        )));
    }
    fs::create_dir_all(&config.scratch_root).map_err(|e| SimError::ToolError(e.to_string()))?;
    let dir = tempfile_dir(&config.scratch_root)?;
    let file = dir.join("check.v");
    fs::write(&file, source).map_err(|e| SimError::ToolError(e.to_string()))?;
    let mut cmd = Command::new(&config.compiler_command);
    cmd.current_dir(&dir);
    match config.toolchain {
        ToolchainKind::Icarus => {
            cmd.args(["-g2012", "-t", "null"]).args(&config.extra_flags).arg("check.v");
        }
        ToolchainKind::Verilator => {
            cmd.arg("--lint-only")
                .args(verilator_frontend_args(config))
                .args(["-Wno-MULTITOP", "check.v"]);
        }
    }
    let result = build_step(harness, cmd, config.compile_timeout, cancel);
    let _ = fs::remove_dir_all(&dir);
    let (ok, log) = result?;
    if ok {
        return Ok(None);
    }
    let errors: Vec<&str> = log
        .lines()
        .filter(|l| {
            let lower = l.to_ascii_lowercase();
            (l.starts_with("%Error") || lower.contains("error:") || lower.contains("i give up"))
                && !is_summary(l)
        })
        .collect();
    if !errors.is_empty() && errors.iter().all(|l| is_missing_module(l)) {
        return Ok(None);
    }
    Ok(Some(compile_failure(&log, config.max_log_bytes)))
}

fn tempfile_dir(root: &Path) -> Result<PathBuf, SimError> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static N: AtomicU64 = AtomicU64::new(0);
    let dir = root.join(format!(
        "syntax-{}-{}",
        std::process::id(),
        N.fetch_add(1, Ordering::Relaxed)
    ));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).map_err(|e| SimError::ToolError(e.to_string()))?;
    Ok(dir)
}

#[allow(dead_code)]
fn _assert_send_sync() {
    fn f<T: Send + Sync>() {}
    f::<SimHarness>();
    let _ = Duration::ZERO;
}
