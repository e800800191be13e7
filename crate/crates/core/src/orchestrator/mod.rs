//! The iteration loop and the parallel race around it.

mod parallel;
mod rundir;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cancel::CancelToken;
use crate::coordinator::{CoordinatorConfig, EvolvingContext, RestartEvent};
use crate::generator::{build_prompt, generate, GenerateError, GeneratorConfig};
use crate::llm::RoleBackends;
use crate::model::{AttemptKind, IterationRecord, RtlTask, Trajectory, TrajectoryOutcome};
use crate::reflector::{fingerprint, reflect, DiagnosticReport, ReflectorConfig};
use crate::sim::{FailureClass, SimVerdict, StructuredFeedback, Verifier};

pub use parallel::{
    iteration_accounting, run_parallel, AccountingError, BackendFactory, IterationPair,
    IterationStats, ObserverFactory, ParallelConfig, ParallelOutcome, Schedule,
};
pub use rundir::{
    read_events, JsonlObserver, OutcomeFile, ProcessSummary, RunDir, RunRole, RunTiming, OUTCOME_FILE,
    WINNER_FILE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub max_iterations: usize,
    pub generator: GeneratorConfig,
    pub reflector: ReflectorConfig,
    pub coordinator: CoordinatorConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            generator: GeneratorConfig::default(),
            reflector: ReflectorConfig::default(),
            coordinator: CoordinatorConfig::default(),
        }
    }
}

/// One line of a trajectory stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LoopEvent {
    Iteration {
        process_id: usize,
        record: IterationRecord,
        context: EvolvingContext,
    },
    Restart {
        process_id: usize,
        after_iteration: usize,
        event: RestartEvent,
        context: EvolvingContext,
    },
    Outcome {
        process_id: usize,
        outcome: TrajectoryOutcome,
        iterations: usize,
        restart_count: usize,
        error: Option<String>,
    },
}

/// Hooks into a running loop.
pub trait LoopObserver {
    /// Called before iteration `index` starts. Returning false stops the
    /// loop as cancelled.
    fn before_iteration(&mut self, _index: usize) -> bool {
        true
    }

    fn on_event(&mut self, _event: &LoopEvent) {}
}

/// Observes nothing.
pub struct NoObserver;

impl LoopObserver for NoObserver {}

impl<T: LoopObserver + ?Sized> LoopObserver for Box<T> {
    fn before_iteration(&mut self, index: usize) -> bool {
        (**self).before_iteration(index)
    }

    fn on_event(&mut self, event: &LoopEvent) {
        (**self).on_event(event)
    }
}

/// Runs one loop to completion without observers.
pub fn run_loop(
    task: &RtlTask,
    backends: &RoleBackends,
    verifier: &dyn Verifier,
    config: &LoopConfig,
    cancel: &CancelToken,
) -> Trajectory {
    run_loop_observed(task, backends, verifier, config, cancel, 0, &mut NoObserver)
}

/// Local stand-in when the Reflector cannot produce a report: the
/// simulator feedback itself becomes the guidance.
fn fallback_report(feedback: &StructuredFeedback, reason: &str) -> DiagnosticReport {
    tracing::warn!("reflector unavailable, using raw feedback: {reason}");
    DiagnosticReport {
        root_cause: String::new(),
        fix_guidance: feedback.render(),
        fingerprint: fingerprint(feedback),
        structured: false,
    }
}

enum Stop {
    Cancelled,
    Aborted(String),
}

/// Generator -> simulator -> Reflector -> Coordinator, repeated until the
/// candidate passes, the budget runs out, or `cancel` fires. Cancellation
/// is checked before every external call; an iteration cut short by it is
/// discarded.
pub fn run_loop_observed(
    task: &RtlTask,
    backends: &RoleBackends,
    verifier: &dyn Verifier,
    config: &LoopConfig,
    cancel: &CancelToken,
    process_id: usize,
    observer: &mut dyn LoopObserver,
) -> Trajectory {
    let mut ctx = EvolvingContext::new();
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut next_kind = AttemptKind::Fresh;
    let mut error = None;
    let mut stop = None;

    for index in 1..=config.max_iterations {
        if cancel.is_cancelled() || !observer.before_iteration(index) {
            stop = Some(Stop::Cancelled);
            break;
        }
        let started = Instant::now();
        let kind = next_kind;

        let mut depth = config.coordinator.history_depth;
        let prompt = loop {
            match build_prompt(task, &ctx, kind, depth, config.generator.prompt_budget) {
                Ok(p) => break Ok(p),
                Err(GenerateError::PromptOverflow { .. }) if depth > 0 => depth /= 2,
                Err(e) => break Err(e),
            }
        };
        let prompt = match prompt {
            Ok(p) => p,
            Err(e) => {
                stop = Some(Stop::Aborted(e.to_string()));
                break;
            }
        };

        if cancel.is_cancelled() {
            stop = Some(Stop::Cancelled);
            break;
        }
        let (code, verdict) =
            match generate(&prompt, backends.generator.as_ref(), &config.generator) {
                Ok(code) => {
                    if cancel.is_cancelled() {
                        stop = Some(Stop::Cancelled);
                        break;
                    }
                    let verdict = verifier.verify(task, &code, cancel);
                    (code, verdict)
                }
                Err(GenerateError::NoCodeBlock) => {
                    let fb = StructuredFeedback::new(
                        FailureClass::CompileError,
                        "reply contained no Verilog code block",
                    );
                    (String::new(), SimVerdict::CompileError(fb))
                }
                Err(e) => (String::new(), SimVerdict::ToolError(format!("generator: {e}"))),
            };
        if cancel.is_cancelled() && !verdict.is_pass() {
            stop = Some(Stop::Cancelled);
            break;
        }

        let mut record = IterationRecord {
            index,
            attempt_kind: kind,
            generated_code: code,
            verdict,
            diagnostic: None,
            restarted: kind == AttemptKind::Restart,
            wall_time: 0.0,
        };

        let feedback = match &record.verdict {
            SimVerdict::Pass | SimVerdict::ToolError(_) => None,
            v => v.feedback().cloned(),
        };
        if let Some(fb) = feedback {
            let report = match reflect(
                task,
                &record.generated_code,
                &fb,
                &ctx,
                backends.reflector.as_ref(),
                &config.reflector,
            ) {
                Ok(r) => r,
                Err(e) => fallback_report(&fb, &e.to_string()),
            };
            ctx.update(&record, &report);
            record.diagnostic = Some(report);
        }
        record.wall_time = started.elapsed().as_secs_f64();
        let verdict_done = record.verdict.clone();
        records.push(record.clone());
        observer.on_event(&LoopEvent::Iteration {
            process_id,
            record,
            context: ctx.clone(),
        });

        match verdict_done {
            SimVerdict::Pass => break,
            SimVerdict::ToolError(msg) => {
                error = Some(msg);
                break;
            }
            _ => {}
        }

        next_kind = AttemptKind::Repair;
        if index < config.max_iterations && ctx.check_stagnation(&config.coordinator) {
            if cancel.is_cancelled() {
                stop = Some(Stop::Cancelled);
                break;
            }
            let run = ctx.consecutive_same.as_ref().map_or(0, |s| s.run);
            let streak = &records[records.len() - run..];
            let event = ctx.restart(
                task,
                streak,
                backends.coordinator.as_ref(),
                &config.coordinator,
            );
            observer.on_event(&LoopEvent::Restart {
                process_id,
                after_iteration: index,
                event,
                context: ctx.clone(),
            });
            next_kind = AttemptKind::Restart;
        }
    }

    let outcome = match stop {
        Some(Stop::Aborted(msg)) => {
            error = Some(msg);
            TrajectoryOutcome::Exhausted
        }
        Some(Stop::Cancelled) => TrajectoryOutcome::Cancelled,
        None => TrajectoryOutcome::from_records(&records, config.max_iterations),
    };
    let trajectory = Trajectory {
        task_id: task.id.clone(),
        process_id,
        records,
        outcome,
        restart_count: ctx.restart_count,
        error,
    };
    observer.on_event(&LoopEvent::Outcome {
        process_id,
        outcome: trajectory.outcome,
        iterations: trajectory.iterations(),
        restart_count: trajectory.restart_count,
        error: trajectory.error.clone(),
    });
    trajectory
}
