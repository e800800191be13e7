//! The evolving debugging context: history, resolution tracking, stagnation
//! detection and restarts with insight distillation.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::generator::fill;
use crate::llm::{ChatBackend, ChatMessage, ChatRequest, DEFAULT_ANALYST_TEMPERATURE};
use crate::model::{IterationRecord, RtlTask};
use crate::reflector::{DiagnosticReport, ErrorFingerprint};

const SYSTEM: &str = include_str!("../templates/coordinator_system.txt");
const USER: &str = include_str!("../templates/coordinator_user.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoordinatorConfig {
    /// Identical consecutive failures that count as stagnation (K).
    pub stagnation_threshold: usize,
    pub max_restarts: usize,
    /// Open entries rendered into the Generator prompt.
    pub history_depth: usize,
    pub insight_limit: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            stagnation_threshold: 4,
            max_restarts: 3,
            history_depth: 8,
            insight_limit: 10,
            temperature: DEFAULT_ANALYST_TEMPERATURE,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CoordinatorConfigError {
    #[error("stagnation_threshold must be at least 2, got {0}")]
    Threshold(usize),
}

impl CoordinatorConfig {
    pub fn validate(&self) -> Result<(), CoordinatorConfigError> {
        if self.stagnation_threshold < 2 {
            return Err(CoordinatorConfigError::Threshold(self.stagnation_threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub fingerprint: ErrorFingerprint,
    pub guidance_summary: String,
    pub resolved: bool,
}

/// Current run of identical failures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Streak {
    pub fingerprint: ErrorFingerprint,
    pub run: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolvingContext {
    pub entries: Vec<HistoryEntry>,
    pub insights: Vec<String>,
    pub restart_count: usize,
    pub consecutive_same: Option<Streak>,
    pub last_code_hash: Option<String>,
    /// Every failing iteration since the last restart.
    pub failure_log: Vec<(usize, ErrorFingerprint)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distillation {
    Gateway,
    /// The gateway failed; the streak's guidance was used verbatim.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestartEvent {
    /// 1-based count after this restart.
    pub restart: usize,
    pub distillation: Distillation,
    pub insights_added: Vec<String>,
    pub error: Option<String>,
}

fn code_hash(code: &str) -> String {
    hex::encode(&Sha256::digest(code.as_bytes())[..8])
}

fn bullet_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*+\u{2022}]+|\d+[.)]|\(\d+\))\s*").unwrap())
}

/// Reply lines with list markers removed.
pub fn parse_insights(reply: &str) -> Vec<String> {
    reply
        .lines()
        .map(|l| bullet_re().replace(l, "").trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

impl EvolvingContext {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds one failing iteration into the history.
    pub fn update(&mut self, record: &IterationRecord, report: &DiagnosticReport) {
        let fp = report.fingerprint.clone();
        let iteration = record.index;
        self.last_code_hash = Some(code_hash(&record.generated_code));

        let previous = self.failure_log.last().map(|(_, f)| f.clone());
        self.consecutive_same = Some(match (&self.consecutive_same, previous) {
            (Some(s), Some(p)) if p == fp && s.fingerprint == fp => Streak {
                fingerprint: fp.clone(),
                run: s.run + 1,
            },
            _ => Streak {
                fingerprint: fp.clone(),
                run: 1,
            },
        });
        self.failure_log.push((iteration, fp.clone()));

        let summary = report.guidance_summary();
        let reopen = self
            .entries
            .iter()
            .rposition(|e| e.fingerprint == fp)
            .filter(|&i| self.entries[i].resolved);
        match reopen {
            Some(i) => {
                let e = &mut self.entries[i];
                e.iteration = iteration;
                e.guidance_summary = summary;
                e.resolved = false;
            }
            None => self.entries.push(HistoryEntry {
                iteration,
                fingerprint: fp,
                guidance_summary: summary,
                resolved: false,
            }),
        }
        self.recompute_resolved();
    }

    /// An entry is resolved once some later failure exists and none of the
    /// later failures carries its fingerprint.
    fn recompute_resolved(&mut self) {
        let log = &self.failure_log;
        for e in &mut self.entries {
            let mut later = log.iter().filter(|(i, _)| *i > e.iteration).peekable();
            let any_later = later.peek().is_some();
            e.resolved = any_later && !later.any(|(_, f)| *f == e.fingerprint);
        }
    }

    pub fn check_stagnation(&self, config: &CoordinatorConfig) -> bool {
        self.consecutive_same
            .as_ref()
            .is_some_and(|s| s.run >= config.stagnation_threshold)
            && self.restart_count < config.max_restarts
    }

    fn add_insights(&mut self, candidates: Vec<String>, limit: usize) -> Vec<String> {
        let mut added = Vec::new();
        for c in candidates {
            if self.insights.len() >= limit {
                break;
            }
            if !self.insights.contains(&c) {
                self.insights.push(c.clone());
                added.push(c);
            }
        }
        added
    }

    /// Distills the failing streak into insights, then clears the history.
    /// `failed` are the iterations of the streak, oldest first.
    pub fn restart(
        &mut self,
        task: &RtlTask,
        failed: &[IterationRecord],
        backend: &dyn ChatBackend,
        config: &CoordinatorConfig,
    ) -> RestartEvent {
        let request = build_restart_request(task, failed, config);
        let (candidates, distillation, error) = match backend.complete(&request) {
            Ok(r) if !parse_insights(&r.content).is_empty() => {
                (parse_insights(&r.content), Distillation::Gateway, None)
            }
            Ok(_) => (
                self.streak_guidance(failed),
                Distillation::Fallback,
                Some("empty distillation".to_string()),
            ),
            Err(e) => (
                self.streak_guidance(failed),
                Distillation::Fallback,
                Some(e.to_string()),
            ),
        };
        let insights_added = self.add_insights(candidates, config.insight_limit);
        self.entries.clear();
        self.failure_log.clear();
        self.consecutive_same = None;
        self.restart_count += 1;
        RestartEvent {
            restart: self.restart_count,
            distillation,
            insights_added,
            error,
        }
    }

    fn streak_guidance(&self, failed: &[IterationRecord]) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let from_records = failed
            .iter()
            .filter_map(|r| r.diagnostic.as_ref().map(|d| d.guidance_summary()));
        let fp = self.consecutive_same.as_ref().map(|s| &s.fingerprint);
        let from_entries = self
            .entries
            .iter()
            .filter(|e| Some(&e.fingerprint) == fp)
            .map(|e| e.guidance_summary.clone());
        for g in from_records.chain(from_entries) {
            if !g.is_empty() && !out.contains(&g) {
                out.push(g);
            }
        }
        out
    }

    /// Only the insights, for the prompt after a restart.
    pub fn render_insights(&self) -> String {
        if self.insights.is_empty() {
            return String::new();
        }
        let mut out = String::from("INSIGHTS\n");
        for i in &self.insights {
            out.push_str(&format!("- {i}\n"));
        }
        out
    }

    /// INSIGHTS, then RESOLVED, then the newest `depth` OPEN entries.
    ///
    /// ```
    /// use hdlagent::coordinator::EvolvingContext;
    /// assert_eq!(EvolvingContext::new().render(8), "");
    /// ```
    pub fn render(&self, depth: usize) -> String {
        let mut sections = Vec::new();
        let insights = self.render_insights();
        if !insights.is_empty() {
            sections.push(insights);
        }
        let resolved: Vec<_> = self.entries.iter().filter(|e| e.resolved).collect();
        if !resolved.is_empty() {
            let mut s = String::from("RESOLVED\n");
            for e in resolved {
                s.push_str(&format!("- iteration {}: {}\n", e.iteration, e.guidance_summary));
            }
            sections.push(s);
        }
        let open: Vec<_> = self.entries.iter().filter(|e| !e.resolved).collect();
        let shown = &open[open.len().saturating_sub(depth)..];
        if !shown.is_empty() {
            let mut s = String::from("OPEN\n");
            for e in shown {
                s.push_str(&format!(
                    "- iteration {} [error {}]: {}\n",
                    e.iteration,
                    e.fingerprint.label(),
                    e.guidance_summary
                ));
            }
            sections.push(s);
        }
        sections.join("\n")
    }
}

pub fn build_restart_request(
    task: &RtlTask,
    failed: &[IterationRecord],
    config: &CoordinatorConfig,
) -> ChatRequest {
    let mut attempts = String::new();
    for r in failed {
        let error = r
            .verdict
            .feedback()
            .map(|f| f.error_message.as_str())
            .unwrap_or("");
        let guidance = r
            .diagnostic
            .as_ref()
            .map(|d| d.guidance_summary())
            .unwrap_or_default();
        attempts.push_str(&format!(
            "- iteration {}: error: {} | guidance tried: {}\n",
            r.index, error, guidance
        ));
    }
    let limit = config.insight_limit.to_string();
    let system = fill(SYSTEM, &[("limit", &limit)]);
    let user = fill(
        USER,
        &[
            ("spec", task.specification.trim_end()),
            ("attempts", attempts.trim_end()),
        ],
    );
    let mut req = ChatRequest::new(
        "coordinator",
        vec![ChatMessage::system(system.trim_end()), ChatMessage::user(user.trim_end())],
        config.temperature,
    );
    req.max_tokens = config.max_tokens;
    req
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{LlmError, Rule, Script, ScriptedBackend};
    use crate::model::{AttemptKind, SourceFile, TaskCategory};
    use crate::sim::{FailureClass, SimVerdict, StructuredFeedback};

    fn fp(s: &str) -> ErrorFingerprint {
        ErrorFingerprint(format!("{s:0>16}"))
    }

    fn step(ctx: &mut EvolvingContext, i: usize, f: &str) -> IterationRecord {
        let report = DiagnosticReport {
            root_cause: String::new(),
            fix_guidance: format!("fix {f} at {i}"),
            fingerprint: fp(f),
            structured: true,
        };
        let rec = IterationRecord {
            index: i,
            attempt_kind: AttemptKind::Repair,
            generated_code: format!("module m; // {i}\nendmodule"),
            verdict: SimVerdict::Fail(StructuredFeedback::new(FailureClass::OutputMismatch, f)),
            diagnostic: Some(report.clone()),
            restarted: false,
            wall_time: 0.0,
        };
        ctx.update(&rec, &report);
        rec
    }

    fn task() -> RtlTask {
        RtlTask {
            id: "t".into(),
            category: TaskCategory::SpecToRtl,
            specification: "spec".into(),
            prior_code: None,
            testbench_sources: vec![SourceFile {
                name: "tb.v".into(),
                content: "module tb; endmodule".into(),
            }],
            top_module: "m".into(),
            sim_timeout: 1.0,
        }
    }

    struct Down;
    impl ChatBackend for Down {
        fn id(&self) -> String {
            "down".into()
        }
        fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, LlmError> {
            Err(LlmError::RetriesExhausted {
                attempts: 1,
                last: "down".into(),
            })
        }
    }
    use crate::llm::ChatResponse;

    #[test]
    fn base_case_and_increment() {
        let mut c = EvolvingContext::new();
        step(&mut c, 1, "a");
        assert_eq!(c.entries.len(), 1);
        assert_eq!(c.consecutive_same, Some(Streak { fingerprint: fp("a"), run: 1 }));
        step(&mut c, 2, "a");
        step(&mut c, 3, "a");
        assert_eq!(c.consecutive_same.as_ref().unwrap().run, 3);
    }

    #[test]
    fn resolution_example() {
        let mut c = EvolvingContext::new();
        for (i, f) in ["a", "a", "b", "b"].iter().enumerate() {
            step(&mut c, i + 1, f);
        }
        assert_eq!(c.consecutive_same, Some(Streak { fingerprint: fp("b"), run: 2 }));
        let flags: Vec<_> = c.entries.iter().map(|e| (e.fingerprint.clone(), e.resolved)).collect();
        // The second A entry has no later A; the first is followed by one.
        assert_eq!(
            flags,
            vec![(fp("a"), false), (fp("a"), true), (fp("b"), false), (fp("b"), false)]
        );
    }

    #[test]
    fn resolved_fingerprint_is_reopened_not_duplicated() {
        let mut c = EvolvingContext::new();
        step(&mut c, 1, "a");
        step(&mut c, 2, "b");
        assert!(c.entries[0].resolved);
        step(&mut c, 3, "a");
        assert_eq!(c.entries.len(), 2);
        assert_eq!(c.entries[0].iteration, 3);
        assert!(!c.entries[0].resolved);
        assert!(c.entries[1].resolved);
    }

    #[test]
    fn stagnation_rule() {
        let cfg = CoordinatorConfig::default();
        let mut c = EvolvingContext::new();
        for i in 1..=3 {
            step(&mut c, i, "a");
        }
        assert!(!c.check_stagnation(&cfg));
        step(&mut c, 4, "a");
        assert!(c.check_stagnation(&cfg));
        c.restart_count = cfg.max_restarts;
        for i in 5..=9 {
            step(&mut c, i, "a");
        }
        assert!(!c.check_stagnation(&cfg));
    }

    #[test]
    fn restart_with_summarizer() {
        let cfg = CoordinatorConfig::default();
        let mut c = EvolvingContext::new();
        let recs: Vec<_> = (1..=4).map(|i| step(&mut c, i, "a")).collect();
        let b = ScriptedBackend::new(
            Script::new(vec![Rule::reply("validate first interval before detection").tag("coordinator")]),
            0,
        )
        .unwrap();
        let ev = c.restart(&task(), &recs, &b, &cfg);
        assert_eq!(ev.distillation, Distillation::Gateway);
        assert_eq!(c.insights, vec!["validate first interval before detection"]);
        assert!(c.entries.is_empty());
        assert_eq!(c.restart_count, 1);
        assert_eq!(c.consecutive_same, None);
        assert_eq!(c.render(8), "INSIGHTS\n- validate first interval before detection\n");
    }

    #[test]
    fn restart_falls_back_on_gateway_error() {
        let cfg = CoordinatorConfig::default();
        let mut c = EvolvingContext::new();
        let recs: Vec<_> = (1..=4).map(|i| step(&mut c, i, "a")).collect();
        let ev = c.restart(&task(), &recs, &Down, &cfg);
        assert_eq!(ev.distillation, Distillation::Fallback);
        assert_eq!(c.insights.len(), 4);
        assert_eq!(c.insights[0], "fix a at 1");
    }

    #[test]
    fn restart_budget_is_respected() {
        let cfg = CoordinatorConfig {
            max_restarts: 2,
            ..Default::default()
        };
        let mut c = EvolvingContext::new();
        let mut streak = Vec::new();
        for i in 1..=30 {
            streak.push(step(&mut c, i, "a"));
            if c.check_stagnation(&cfg) {
                c.restart(&task(), &streak, &Down, &cfg);
                streak.clear();
            }
        }
        assert_eq!(c.restart_count, 2);
    }

    #[test]
    fn render_sections_and_depth() {
        let mut c = EvolvingContext::new();
        for (i, f) in ["a", "b", "c"].iter().enumerate() {
            step(&mut c, i + 1, f);
        }
        // a and b are resolved (each followed only by other errors).
        let text = c.render(8);
        assert!(text.starts_with("RESOLVED\n"));
        assert!(text.contains("OPEN\n"));

        let mut c = EvolvingContext::new();
        for i in 1..=3 {
            step(&mut c, i, "a");
        }
        let text = c.render(2);
        assert!(!text.contains("fix a at 1"));
        assert!(text.contains("fix a at 2"));
        assert!(text.find("fix a at 2") < text.find("fix a at 3"));

        let c = EvolvingContext {
            insights: vec!["x".into()],
            ..Default::default()
        };
        assert_eq!(c.render(8), "INSIGHTS\n- x\n");
    }

    #[test]
    fn insight_parsing() {
        assert_eq!(
            parse_insights("- one\n* two\n\n3. three\n  \u{2022} four\n"),
            vec!["one", "two", "three", "four"]
        );
    }
}
