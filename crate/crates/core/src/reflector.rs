//! Failure analysis: error fingerprints and the diagnostic report.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coordinator::EvolvingContext;
use crate::generator::fill;
use crate::llm::{ChatBackend, ChatMessage, ChatRequest, LlmError, DEFAULT_ANALYST_TEMPERATURE};
use crate::model::RtlTask;
use crate::sim::StructuredFeedback;

const SYSTEM: &str = include_str!("../templates/reflector_system.txt");
const USER: &str = include_str!("../templates/reflector_user.txt");

/// Short digest deciding whether two failures are "the same error".
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ErrorFingerprint(pub String);

impl ErrorFingerprint {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Eight hex digits, enough to tell entries apart in a prompt.
    pub fn label(&self) -> &str {
        &self.0[..self.0.len().min(8)]
    }
}

impl fmt::Display for ErrorFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

struct Norm {
    labelled: Regex,
    based: Regex,
    hex: Regex,
    decimal: Regex,
    space: Regex,
}

fn norm() -> &'static Norm {
    static N: OnceLock<Norm> = OnceLock::new();
    N.get_or_init(|| Norm {
        labelled: Regex::new(r"\b(expected|actual|got|time)\s*[=:]\s*[^\s,;]+").unwrap(),
        based: Regex::new(r"\d*\s*'[sS]?[bBoOdDhH]\s*[0-9a-fA-FxXzZ?_]+").unwrap(),
        hex: Regex::new(r"\b0x[0-9a-f_]+\b").unwrap(),
        decimal: Regex::new(r"\b\d+(?:\.\d+)?").unwrap(),
        space: Regex::new(r"\s+").unwrap(),
    })
}

/// Lowercases and replaces every literal value and simulation time with `#`.
pub fn normalize_message(message: &str) -> String {
    let n = norm();
    let s = message.to_lowercase();
    let s = n.labelled.replace_all(&s, "$1=#");
    let s = n.based.replace_all(&s, "#");
    let s = n.hex.replace_all(&s, "#");
    let s = n.decimal.replace_all(&s, "#");
    n.space.replace_all(s.trim(), " ").into_owned()
}

/// Hash of (failure class, sorted distinct mismatch signals, normalized
/// message), truncated to 16 hex digits.
///
/// ```
/// use hdlagent::reflector::fingerprint;
/// use hdlagent::sim::{parse_tb_fail, FailureClass, StructuredFeedback};
///
/// let fb = |line: &str| {
///     let mut f = StructuredFeedback::new(FailureClass::OutputMismatch, line);
///     f.mismatches.push(parse_tb_fail(line).unwrap());
///     f
/// };
/// let a = fb("TB_FAIL signal=sum time=40 expected=8 actual=7");
/// let b = fb("TB_FAIL signal=sum time=80 expected=3 actual=1");
/// let c = fb("TB_FAIL signal=carry time=40 expected=1 actual=0");
/// assert_eq!(fingerprint(&a), fingerprint(&b));
/// assert_ne!(fingerprint(&a), fingerprint(&c));
/// ```
pub fn fingerprint(feedback: &StructuredFeedback) -> ErrorFingerprint {
    let mut signals: Vec<String> = feedback
        .mismatches
        .iter()
        .map(|m| m.signal.to_lowercase())
        .collect();
    signals.sort();
    signals.dedup();
    let mut h = Sha256::new();
    h.update(feedback.failure_class.as_str());
    h.update(b"\n");
    h.update(signals.join(","));
    h.update(b"\n");
    h.update(normalize_message(&feedback.error_message));
    ErrorFingerprint(hex::encode(&h.finalize()[..8]))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub root_cause: String,
    pub fix_guidance: String,
    pub fingerprint: ErrorFingerprint,
    /// Whether the reply followed the tagged-section format.
    pub structured: bool,
}

impl DiagnosticReport {
    /// Whitespace-collapsed guidance, capped for prompt use.
    pub fn guidance_summary(&self) -> String {
        const MAX: usize = 600;
        let flat = norm().space.replace_all(self.fix_guidance.trim(), " ");
        if flat.chars().count() <= MAX {
            flat.into_owned()
        } else {
            let mut s: String = flat.chars().take(MAX).collect();
            s.push_str("...");
            s
        }
    }
}

#[derive(Debug, Error)]
pub enum ReflectError {
    #[error("reflector returned an empty reply")]
    EmptyReflection,
    #[error(transparent)]
    Gateway(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReflectorConfig {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ReflectorConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_ANALYST_TEMPERATURE,
            max_tokens: 2048,
        }
    }
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^[\s*#>_-]*(ROOT[ _]CAUSE|FIX[ _]GUIDANCE)[\s*_]*:[\s*_]*").unwrap()
    })
}

/// Splits a reply into its ROOT_CAUSE and FIX_GUIDANCE sections.
pub fn parse_reply(reply: &str, fp: ErrorFingerprint) -> Result<DiagnosticReport, ReflectError> {
    let reply = reply.trim();
    if reply.is_empty() {
        return Err(ReflectError::EmptyReflection);
    }
    let tags: Vec<_> = tag_re().captures_iter(reply).collect();
    let mut root = None;
    let mut guidance = None;
    for (i, caps) in tags.iter().enumerate() {
        let whole = caps.get(0).unwrap();
        let end = tags
            .get(i + 1)
            .map(|c| c.get(0).unwrap().start())
            .unwrap_or(reply.len());
        let body = reply[whole.end()..end].trim().to_string();
        let key = caps[1].to_ascii_uppercase().replace(' ', "_");
        let slot = if key == "ROOT_CAUSE" { &mut root } else { &mut guidance };
        if slot.is_none() {
            *slot = Some(body);
        }
    }
    Ok(match guidance.filter(|g| !g.is_empty()) {
        Some(fix_guidance) => DiagnosticReport {
            root_cause: root.unwrap_or_default(),
            fix_guidance,
            fingerprint: fp,
            structured: true,
        },
        None => DiagnosticReport {
            root_cause: String::new(),
            fix_guidance: reply.to_string(),
            fingerprint: fp,
            structured: false,
        },
    })
}

/// Builds the Reflector request.
pub fn build_request(
    task: &RtlTask,
    code: &str,
    feedback: &StructuredFeedback,
    context: &EvolvingContext,
    config: &ReflectorConfig,
) -> ChatRequest {
    let mut fb = feedback.render();
    if !feedback.log_excerpt.is_empty() {
        fb.push_str("log excerpt:\n");
        fb.push_str(feedback.log_excerpt.trim_end());
        fb.push('\n');
    }
    let history = context.render(usize::MAX);
    let context_section = if history.is_empty() {
        String::new()
    } else {
        format!("\nDEBUGGING HISTORY\n{history}")
    };
    let user = fill(
        USER,
        &[
            ("spec", task.specification.trim_end()),
            ("code", code.trim_end()),
            ("feedback", fb.trim_end()),
            ("context", &context_section),
        ],
    );
    let mut req = ChatRequest::new(
        "reflector",
        vec![ChatMessage::system(SYSTEM.trim_end()), ChatMessage::user(user.trim_end())],
        config.temperature,
    );
    req.max_tokens = config.max_tokens;
    req
}

/// One gateway call turning a failure into a [`DiagnosticReport`]. The
/// fingerprint is always computed locally from `feedback`.
pub fn reflect(
    task: &RtlTask,
    code: &str,
    feedback: &StructuredFeedback,
    context: &EvolvingContext,
    backend: &dyn ChatBackend,
    config: &ReflectorConfig,
) -> Result<DiagnosticReport, ReflectError> {
    let request = build_request(task, code, feedback, context, config);
    let reply = backend.complete(&request)?;
    parse_reply(&reply.content, fingerprint(feedback))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{FailureClass, SignalMismatch};

    fn mismatch(signal: &str, time: u64, e: &str, a: &str) -> StructuredFeedback {
        let mut f = StructuredFeedback::new(
            FailureClass::OutputMismatch,
            format!("TB_FAIL signal={signal} time={time} expected={e} actual={a}"),
        );
        f.mismatches.push(SignalMismatch {
            signal: signal.into(),
            time: Some(time),
            expected: e.into(),
            actual: a.into(),
        });
        f
    }

    #[test]
    fn times_and_values_are_normalized_away() {
        assert_eq!(
            fingerprint(&mismatch("sum", 40, "8", "7")),
            fingerprint(&mismatch("sum", 80, "3", "1"))
        );
        assert_eq!(
            fingerprint(&mismatch("sum", 40, "4'b1000", "4'h7")),
            fingerprint(&mismatch("sum", 80, "0x3", "1"))
        );
    }

    #[test]
    fn signal_and_class_are_kept() {
        assert_ne!(
            fingerprint(&mismatch("sum", 40, "8", "7")),
            fingerprint(&mismatch("carry", 40, "8", "7"))
        );
        let assertion = StructuredFeedback::new(FailureClass::AssertionFail, "req without grant");
        let mut grant = StructuredFeedback::new(FailureClass::OutputMismatch, "req without grant");
        grant.mismatches.push(SignalMismatch {
            signal: "grant".into(),
            time: None,
            expected: "1".into(),
            actual: "0".into(),
        });
        assert_ne!(fingerprint(&assertion), fingerprint(&grant));
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(
            normalize_message("ASSERTION FAILED at time 120: req without grant"),
            "assertion failed at time #: req without grant"
        );
        assert_eq!(normalize_message("got 8'hFF  want 3"), "got # want #");
        assert_eq!(normalize_message("sum1 mismatch at 40ns"), "sum1 mismatch at #ns");
        assert_eq!(fingerprint(&mismatch("s", 1, "1", "0")).as_str().len(), 16);
    }

    #[test]
    fn parses_tagged_reply() {
        let fp = ErrorFingerprint("0123456789abcdef".into());
        let r = parse_reply(
            "ROOT_CAUSE: off-by-one\nFIX_GUIDANCE: delay detection one cycle",
            fp.clone(),
        )
        .unwrap();
        assert_eq!(r.root_cause, "off-by-one");
        assert_eq!(r.fix_guidance, "delay detection one cycle");
        assert!(r.structured);

        let r = parse_reply("**Root cause:** x\n\n**Fix guidance:**\n- a\n- b\n", fp.clone()).unwrap();
        assert_eq!(r.root_cause, "x");
        assert_eq!(r.fix_guidance, "- a\n- b");
        assert!(r.structured);
    }

    #[test]
    fn untagged_and_empty_replies() {
        let fp = ErrorFingerprint("0123456789abcdef".into());
        let r = parse_reply("just rewrite the adder", fp.clone()).unwrap();
        assert!(!r.structured);
        assert_eq!(r.root_cause, "");
        assert_eq!(r.fix_guidance, "just rewrite the adder");
        assert!(matches!(parse_reply("  \n", fp), Err(ReflectError::EmptyReflection)));
    }
}
