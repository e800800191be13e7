use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LoopEvent, LoopObserver, ParallelConfig, ParallelOutcome, Schedule};
use crate::model::{RtlTask, TaskCategory, TrajectoryOutcome};

pub const OUTCOME_FILE: &str = "outcome.json";
pub const WINNER_FILE: &str = "winner.v";

/// Streams loop events as JSON lines.
pub struct JsonlObserver {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonlObserver {
    pub fn create(path: impl Into<PathBuf>) -> io::Result<Self> {
        let path = path.into();
        let out = BufWriter::new(File::create(&path)?);
        Ok(Self { out, path })
    }

    fn write(&mut self, event: &LoopEvent) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, event)?;
        self.out.write_all(b"\n")?;
        if matches!(event, LoopEvent::Outcome { .. }) {
            self.out.flush()?;
        }
        Ok(())
    }
}

impl LoopObserver for JsonlObserver {
    fn on_event(&mut self, event: &LoopEvent) {
        if let Err(e) = self.write(event) {
            tracing::warn!("cannot write {}: {e}", self.path.display());
        }
    }
}

/// Reads a trajectory stream back.
pub fn read_events(path: &Path) -> io::Result<Vec<LoopEvent>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(io::Error::from))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunRole {
    Race,
    /// Single-process run paired with the race of the same index.
    SoloBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSummary {
    pub process_id: usize,
    pub outcome: TrajectoryOutcome,
    pub iterations: usize,
    pub restart_count: usize,
    pub error: Option<String>,
}

/// Everything wall-clock dependent lives here so the rest of the file is
/// reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub started_at: String,
    pub wall_time: f64,
    pub cancellation_latency: Option<f64>,
}

/// Contents of `outcome.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFile {
    pub task_id: String,
    pub category: TaskCategory,
    pub role: RunRole,
    pub run: usize,
    pub seed: u64,
    pub processes: usize,
    pub schedule: Schedule,
    pub max_iterations: usize,
    pub solved: bool,
    pub winner: Option<usize>,
    pub iterations_to_success: Option<usize>,
    pub total_iterations_executed: usize,
    pub per_process: Vec<ProcessSummary>,
    pub timing: RunTiming,
}

impl OutcomeFile {
    pub fn new(
        task: &RtlTask,
        outcome: &ParallelOutcome,
        config: &ParallelConfig,
        role: RunRole,
        run: usize,
        seed: u64,
        timing: RunTiming,
    ) -> Self {
        Self {
            task_id: task.id.clone(),
            category: task.category,
            role,
            run,
            seed,
            processes: config.processes,
            schedule: config.schedule,
            max_iterations: config.loop_config.max_iterations,
            solved: outcome.solved(),
            winner: outcome.winner,
            iterations_to_success: outcome.iterations_to_success,
            total_iterations_executed: outcome.total_iterations_executed,
            per_process: outcome
                .trajectories
                .iter()
                .map(|t| ProcessSummary {
                    process_id: t.process_id,
                    outcome: t.outcome,
                    iterations: t.iterations(),
                    restart_count: t.restart_count,
                    error: t.error.clone(),
                })
                .collect(),
            timing,
        }
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(io::Error::from)
    }
}

/// One run directory: a trajectory stream per process, `outcome.json`, and
/// `winner.v` when something passed.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn trajectory_path(&self, process_id: usize) -> PathBuf {
        self.root.join(format!("trajectory_p{process_id}.jsonl"))
    }

    /// An observer for process `process_id`; falls back to discarding
    /// events if the file cannot be created.
    pub fn observer(&self, process_id: usize) -> Box<dyn LoopObserver + Send> {
        match JsonlObserver::create(self.trajectory_path(process_id)) {
            Ok(o) => Box::new(o),
            Err(e) => {
                tracing::warn!("cannot create trajectory file: {e}");
                Box::new(super::NoObserver)
            }
        }
    }

    pub fn write_outcome(&self, outcome: &OutcomeFile, winning_code: Option<&str>) -> io::Result<()> {
        let json = serde_json::to_string_pretty(outcome)? + "\n";
        fs::write(self.root.join(OUTCOME_FILE), json)?;
        if let Some(code) = winning_code {
            let mut code = code.to_string();
            if !code.ends_with('\n') {
                code.push('\n');
            }
            fs::write(self.root.join(WINNER_FILE), code)?;
        }
        Ok(())
    }
}
