use std::sync::mpsc;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{run_loop_observed, LoopConfig, LoopEvent, LoopObserver, NoObserver};
use crate::cancel::CancelToken;
use crate::llm::{LlmError, RoleBackends};
use crate::model::{RtlTask, Trajectory, TrajectoryOutcome};
use crate::sim::Verifier;

/// How racing loops are interleaved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Every loop runs freely; the first success to arrive wins.
    #[default]
    Free,
    /// Loops advance in rounds of one iteration each. The winner is the
    /// earliest success by iteration count, ties to the lowest process id,
    /// so the result does not depend on thread timing.
    Lockstep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelConfig {
    pub processes: usize,
    pub loop_config: LoopConfig,
    /// Seconds the losers get to stop after the winner is known.
    pub cancellation_grace: f64,
    pub schedule: Schedule,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        Self {
            processes: 5,
            loop_config: LoopConfig::default(),
            cancellation_grace: 5.0,
            schedule: Schedule::Free,
        }
    }
}

/// Builds the backends of one racing process. Implementations give each
/// process its own seed or stream.
pub trait BackendFactory: Sync {
    fn backends(&self, process_id: usize) -> Result<RoleBackends, LlmError>;
}

impl<F> BackendFactory for F
where
    F: Fn(usize) -> Result<RoleBackends, LlmError> + Sync,
{
    fn backends(&self, process_id: usize) -> Result<RoleBackends, LlmError> {
        self(process_id)
    }
}

pub type ObserverFactory<'a> = &'a (dyn Fn(usize) -> Box<dyn LoopObserver + Send> + Sync);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelOutcome {
    pub winner: Option<usize>,
    pub winning_code: Option<String>,
    /// Ordered by process id.
    pub trajectories: Vec<Trajectory>,
    /// Completed iterations summed over every process.
    pub total_iterations_executed: usize,
    /// The winner's iteration count.
    pub iterations_to_success: Option<usize>,
    /// Seconds from the winner's report until the last loser stopped.
    pub cancellation_latency: Option<f64>,
}

impl ParallelOutcome {
    pub fn solved(&self) -> bool {
        self.winner.is_some()
    }
}

#[derive(Default)]
struct GateState {
    completed: Vec<usize>,
    finished: Vec<bool>,
    solved_round: Option<usize>,
}

/// Round barrier for [`Schedule::Lockstep`].
struct Gate {
    state: Mutex<GateState>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            state: Mutex::new(GateState {
                completed: vec![0; n],
                finished: vec![false; n],
                solved_round: None,
            }),
            cv: Condvar::new(),
        }
    }

    /// Blocks until every live process finished round `index - 1`. False
    /// when some process already succeeded in an earlier round.
    fn enter(&self, pid: usize, index: usize, cancel: &CancelToken) -> bool {
        let mut s = self.state.lock().unwrap();
        loop {
            if s.solved_round.is_some_and(|r| r < index) || cancel.is_cancelled() {
                return false;
            }
            let behind = (0..s.completed.len())
                .any(|j| j != pid && !s.finished[j] && s.completed[j] + 1 < index);
            if !behind {
                return true;
            }
            s = self.cv.wait_timeout(s, Duration::from_millis(50)).unwrap().0;
        }
    }

    fn completed(&self, pid: usize, index: usize, passed: bool) {
        let mut s = self.state.lock().unwrap();
        s.completed[pid] = index;
        if passed {
            s.solved_round = Some(s.solved_round.map_or(index, |r| r.min(index)));
        }
        self.cv.notify_all();
    }

    fn finish(&self, pid: usize) {
        self.state.lock().unwrap().finished[pid] = true;
        self.cv.notify_all();
    }
}

struct Gated<'a> {
    pid: usize,
    gate: Option<&'a Gate>,
    cancel: CancelToken,
    inner: Box<dyn LoopObserver + Send>,
}

impl LoopObserver for Gated<'_> {
    fn before_iteration(&mut self, index: usize) -> bool {
        if let Some(g) = self.gate {
            if !g.enter(self.pid, index, &self.cancel) {
                return false;
            }
        }
        self.inner.before_iteration(index)
    }

    fn on_event(&mut self, event: &LoopEvent) {
        self.inner.on_event(event);
        if let (Some(g), LoopEvent::Iteration { record, .. }) = (self.gate, event) {
            g.completed(self.pid, record.index, record.verdict.is_pass());
        }
    }
}

fn failed_start(task: &RtlTask, pid: usize, e: LlmError) -> Trajectory {
    Trajectory {
        task_id: task.id.clone(),
        process_id: pid,
        records: Vec::new(),
        outcome: TrajectoryOutcome::Exhausted,
        restart_count: 0,
        error: Some(format!("backend setup: {e}")),
    }
}

/// Races `config.processes` independent loops on `task`. The first success
/// cancels the rest; every trajectory is returned.
pub fn run_parallel(
    task: &RtlTask,
    factory: &dyn BackendFactory,
    verifier: &dyn Verifier,
    config: &ParallelConfig,
    cancel: &CancelToken,
    observers: Option<ObserverFactory<'_>>,
) -> ParallelOutcome {
    let n = config.processes.max(1);
    let race = cancel.child();
    let gate = (config.schedule == Schedule::Lockstep).then(|| Gate::new(n));
    let (tx, rx) = mpsc::channel::<Trajectory>();

    let mut trajectories: Vec<Trajectory> = Vec::with_capacity(n);
    let mut arrival_winner: Option<usize> = None;
    let mut won_at: Option<Instant> = None;

    std::thread::scope(|scope| {
        for pid in 0..n {
            let tx = tx.clone();
            let token = race.child();
            let gate = gate.as_ref();
            scope.spawn(move || {
                let inner: Box<dyn LoopObserver + Send> = match observers {
                    Some(f) => f(pid),
                    None => Box::new(NoObserver),
                };
                let mut obs = Gated {
                    pid,
                    gate,
                    cancel: token.clone(),
                    inner,
                };
                let t = match factory.backends(pid) {
                    Ok(b) => run_loop_observed(
                        task,
                        &b,
                        verifier,
                        &config.loop_config,
                        &token,
                        pid,
                        &mut obs,
                    ),
                    Err(e) => failed_start(task, pid, e),
                };
                if let Some(g) = gate {
                    g.finish(pid);
                }
                let _ = tx.send(t);
            });
        }
        drop(tx);

        for t in rx {
            if t.outcome.solved_at().is_some() && arrival_winner.is_none() {
                arrival_winner = Some(t.process_id);
                won_at = Some(Instant::now());
                if config.schedule == Schedule::Free {
                    race.cancel();
                }
            }
            trajectories.push(t);
        }
    });

    let cancellation_latency = won_at.map(|w| w.elapsed().as_secs_f64());
    if let Some(l) = cancellation_latency {
        if l > config.cancellation_grace {
            tracing::warn!(
                "losing processes took {l:.2} s to stop, grace is {} s",
                config.cancellation_grace
            );
        }
    }
    trajectories.sort_by_key(|t| t.process_id);

    let winner = match config.schedule {
        Schedule::Free => arrival_winner,
        Schedule::Lockstep => trajectories
            .iter()
            .filter_map(|t| t.outcome.solved_at().map(|i| (i, t.process_id)))
            .min()
            .map(|(_, pid)| pid),
    };
    let win = winner.map(|w| &trajectories[w]);
    ParallelOutcome {
        winner,
        winning_code: win
            .and_then(|t| t.records.iter().find(|r| r.verdict.is_pass()))
            .map(|r| r.generated_code.clone()),
        total_iterations_executed: trajectories.iter().map(|t| t.iterations()).sum(),
        iterations_to_success: win.and_then(|t| t.outcome.solved_at()),
        cancellation_latency,
        trajectories,
    }
}

/// Iterations to success of a race and of its solo baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationPair {
    pub parallel: Option<usize>,
    pub solo: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub pairs: usize,
    /// Pairs where both runs succeeded; only these enter the means.
    pub both_solved: usize,
    pub mean_parallel: f64,
    pub mean_solo: f64,
    /// `mean_solo / mean_parallel`.
    pub speedup: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AccountingError {
    #[error("no pair where both the race and the solo run succeeded")]
    NoSolvedPairs,
}

/// Mean iterations to success with and without the race.
///
/// ```
/// use hdlagent::orchestrator::{iteration_accounting, IterationPair};
///
/// let pairs = [
///     IterationPair { parallel: Some(2), solo: Some(6) },
///     IterationPair { parallel: Some(4), solo: Some(6) },
///     IterationPair { parallel: None, solo: Some(1) },
/// ];
/// let s = iteration_accounting(&pairs).unwrap();
/// assert_eq!(s.both_solved, 2);
/// assert_eq!(s.speedup, 2.0);
/// ```
pub fn iteration_accounting(pairs: &[IterationPair]) -> Result<IterationStats, AccountingError> {
    let solved: Vec<(usize, usize)> = pairs
        .iter()
        .filter_map(|p| Some((p.parallel?, p.solo?)))
        .collect();
    if solved.is_empty() {
        return Err(AccountingError::NoSolvedPairs);
    }
    let k = solved.len() as f64;
    let mean_parallel = solved.iter().map(|p| p.0 as f64).sum::<f64>() / k;
    let mean_solo = solved.iter().map(|p| p.1 as f64).sum::<f64>() / k;
    Ok(IterationStats {
        pairs: pairs.len(),
        both_solved: solved.len(),
        mean_parallel,
        mean_solo,
        speedup: mean_solo / mean_parallel,
    })
}
