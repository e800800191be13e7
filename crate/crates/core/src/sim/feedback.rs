use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    AssertionFail,
    OutputMismatch,
    CompileError,
    RuntimeError,
    Timeout,
    Unclassified,
}

impl FailureClass {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureClass::AssertionFail => "assertion_fail",
            FailureClass::OutputMismatch => "output_mismatch",
            FailureClass::CompileError => "compile_error",
            FailureClass::RuntimeError => "runtime_error",
            FailureClass::Timeout => "timeout",
            FailureClass::Unclassified => "unclassified",
        }
    }

    /// Lower ranks win when several classes match one log.
    pub fn precedence(self) -> u8 {
        match self {
            FailureClass::CompileError => 0,
            FailureClass::Timeout => 1,
            FailureClass::AssertionFail => 2,
            FailureClass::OutputMismatch => 3,
            FailureClass::RuntimeError => 4,
            FailureClass::Unclassified => 5,
        }
    }
}

impl fmt::Display for FailureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Expected versus observed value of one signal. Values are verbatim text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalMismatch {
    pub signal: String,
    pub time: Option<u64>,
    pub expected: String,
    pub actual: String,
}

/// Machine-readable digest of a failing compile or simulation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredFeedback {
    pub failure_class: FailureClass,
    pub error_message: String,
    pub mismatches: Vec<SignalMismatch>,
    pub log_excerpt: String,
}

impl StructuredFeedback {
    pub fn new(failure_class: FailureClass, error_message: impl Into<String>) -> Self {
        Self {
            failure_class,
            error_message: error_message.into(),
            mismatches: Vec::new(),
            log_excerpt: String::new(),
        }
    }

    /// Rendering handed to the Reflector.
    pub fn render(&self) -> String {
        let mut out = format!(
            "failure class: {}\nerror: {}\n",
            self.failure_class, self.error_message
        );
        if !self.mismatches.is_empty() {
            out.push_str("mismatches:\n");
            for m in &self.mismatches {
                let time = m.time.map(|t| format!(" @ {t}")).unwrap_or_default();
                out.push_str(&format!(
                    "  {}{}: expected {} actual {}\n",
                    m.signal, time, m.expected, m.actual
                ));
            }
        }
        out
    }
}

/// Final judgement on one candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "feedback", rename_all = "snake_case")]
pub enum SimVerdict {
    Pass,
    Fail(StructuredFeedback),
    CompileError(StructuredFeedback),
    Timeout(StructuredFeedback),
    ToolError(String),
}

impl SimVerdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, SimVerdict::Pass)
    }

    /// Failures the Reflector can diagnose. Tool errors are environment
    /// problems, not candidate failures.
    pub fn is_failure(&self) -> bool {
        self.feedback().is_some()
    }

    pub fn feedback(&self) -> Option<&StructuredFeedback> {
        match self {
            SimVerdict::Fail(f) | SimVerdict::CompileError(f) | SimVerdict::Timeout(f) => Some(f),
            SimVerdict::Pass | SimVerdict::ToolError(_) => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SimVerdict::Pass => "pass",
            SimVerdict::Fail(_) => "fail",
            SimVerdict::CompileError(_) => "compile_error",
            SimVerdict::Timeout(_) => "timeout",
            SimVerdict::ToolError(_) => "tool_error",
        }
    }
}
