//! Turns raw simulator logs into [`StructuredFeedback`].
//!
//! Bundled testbenches speak a line grammar that parses exactly:
//!
//! ```text
//! TB_PASS
//! TB_FAIL signal=<name> time=<t> expected=<value> actual=<value>
//! TB_ASSERT <message>
//! ```
//!
//! Foreign testbenches fall through to a heuristic ladder. When several
//! classes match, `CompileError > Timeout > AssertionFail > OutputMismatch >
//! RuntimeError > Unclassified`.

use std::sync::OnceLock;

use regex::Regex;

use super::feedback::{FailureClass, SignalMismatch, StructuredFeedback};

pub const PASS_MARKER: &str = "TB_PASS";
pub const DEFAULT_MAX_LOG_BYTES: usize = 64 * 1024;
const TRUNCATION_MARKER: &str = "\n... [log truncated] ...\n";

/// How the simulator process ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExitInfo {
    /// `None` when the process died from a signal.
    pub status: Option<i32>,
    pub timed_out: bool,
}

impl ExitInfo {
    pub fn code(status: i32) -> Self {
        Self {
            status: Some(status),
            timed_out: false,
        }
    }

    pub fn timeout() -> Self {
        Self {
            status: None,
            timed_out: true,
        }
    }

    pub fn success(&self) -> bool {
        self.status == Some(0) && !self.timed_out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogOutcome {
    Pass,
    Feedback(StructuredFeedback),
}

struct Patterns {
    pass: Regex,
    tb_fail: Regex,
    tb_assert: Regex,
    compile: Regex,
    assertion: Regex,
    expected_got: Regex,
    runtime: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        pass: Regex::new(r"^\s*TB_PASS\b").unwrap(),
        tb_fail: Regex::new(
            r"^\s*TB_FAIL\s+signal=(\S+)\s+time=(\S+)\s+expected=(\S+)\s+actual=(\S+)\s*$",
        )
        .unwrap(),
        tb_assert: Regex::new(r"^\s*TB_ASSERT\b").unwrap(),
        compile: Regex::new(
            r"(?i)syntax error|error\(s\) during elaboration|I give up|Exiting due to \d+ error|Unknown module type|Cannot find file containing module",
        )
        .unwrap(),
        assertion: Regex::new(r"(?i)assertion\s+(failed|failure|error|violation)|\bassert(ion)?\b[^\n]*\bfail").unwrap(),
        expected_got: Regex::new(
            r"(?i)(?:(?:signal\s+)?([A-Za-z_][\w.\[\]]*)\s*[:,]?\s*)?expected\s*[:=]?\s*([^\s,;]+)\s*[,;]?\s*(?:but\s+)?(?:got|actual|received|observed)\s*[:=]?\s*([^\s,;]+)",
        )
        .unwrap(),
        runtime: Regex::new(r"(?i)\$fatal|%Fatal|\bFATAL\b|\$error|%Error|\bERROR\b").unwrap(),
    })
}

fn first_line<'a>(log: &'a str, re: &Regex) -> Option<&'a str> {
    log.lines().find(|l| re.is_match(l)).map(str::trim)
}

/// Parses one `TB_FAIL` line of the fixture grammar.
pub fn parse_tb_fail(line: &str) -> Option<SignalMismatch> {
    let caps = patterns().tb_fail.captures(line)?;
    let mismatch = SignalMismatch {
        signal: caps[1].to_string(),
        time: caps[2].parse().ok(),
        expected: caps[3].to_string(),
        actual: caps[4].to_string(),
    };
    (mismatch.expected != mismatch.actual).then_some(mismatch)
}

/// Formats a mismatch as a `TB_FAIL` line (no trailing newline).
pub fn format_tb_fail(m: &SignalMismatch) -> String {
    let time = m.time.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
    format!(
        "TB_FAIL signal={} time={} expected={} actual={}",
        m.signal, time, m.expected, m.actual
    )
}

fn heuristic_mismatch(line: &str) -> Option<SignalMismatch> {
    let caps = patterns().expected_got.captures(line)?;
    let signal = caps
        .get(1)
        .map(|m| m.as_str())
        .filter(|s| !s.eq_ignore_ascii_case("value") && !s.eq_ignore_ascii_case("mismatch"))
        .unwrap_or("unknown")
        .to_string();
    let m = SignalMismatch {
        signal,
        time: None,
        expected: caps[2].to_string(),
        actual: caps[3].to_string(),
    };
    (m.expected != m.actual).then_some(m)
}

fn is_failure_line(line: &str) -> bool {
    let p = patterns();
    line.trim_start().starts_with("TB_FAIL")
        || p.tb_assert.is_match(line)
        || p.compile.is_match(line)
        || p.assertion.is_match(line)
        || p.expected_got.is_match(line)
        || p.runtime.is_match(line)
}

/// Classifies a simulation log. Never fails: anything unrecognized is
/// `Unclassified`.
pub fn parse_log(raw_log: &str, exit: ExitInfo) -> LogOutcome {
    parse_log_with_limit(raw_log, exit, DEFAULT_MAX_LOG_BYTES)
}

pub fn parse_log_with_limit(raw_log: &str, exit: ExitInfo, max_log_bytes: usize) -> LogOutcome {
    let p = patterns();
    let excerpt = || truncate_log(raw_log, max_log_bytes);

    if let Some(line) = first_line(raw_log, &p.compile) {
        let mut fb = StructuredFeedback::new(FailureClass::CompileError, line);
        fb.log_excerpt = excerpt();
        return LogOutcome::Feedback(fb);
    }

    let tb_mismatches: Vec<SignalMismatch> = raw_log.lines().filter_map(parse_tb_fail).collect();
    let first_tb_fail = raw_log
        .lines()
        .find(|l| parse_tb_fail(l).is_some())
        .map(str::trim);
    let assertion_line = first_line(raw_log, &p.tb_assert).or_else(|| first_line(raw_log, &p.assertion));

    if exit.timed_out {
        let mut fb = StructuredFeedback::new(
            FailureClass::Timeout,
            "simulation exceeded its time limit and was killed",
        );
        fb.mismatches = tb_mismatches;
        fb.log_excerpt = excerpt();
        return LogOutcome::Feedback(fb);
    }

    if let Some(line) = assertion_line {
        let mut fb = StructuredFeedback::new(FailureClass::AssertionFail, line);
        fb.log_excerpt = excerpt();
        return LogOutcome::Feedback(fb);
    }

    if !tb_mismatches.is_empty() {
        let mut fb = StructuredFeedback::new(
            FailureClass::OutputMismatch,
            first_tb_fail.unwrap_or_default(),
        );
        fb.mismatches = tb_mismatches;
        fb.log_excerpt = excerpt();
        return LogOutcome::Feedback(fb);
    }

    let heuristic: Vec<(&str, SignalMismatch)> = raw_log
        .lines()
        .filter(|l| !l.trim_start().starts_with("TB_FAIL"))
        .filter_map(|l| heuristic_mismatch(l).map(|m| (l.trim(), m)))
        .collect();
    if let Some((line, _)) = heuristic.first() {
        let mut fb = StructuredFeedback::new(FailureClass::OutputMismatch, *line);
        fb.mismatches = heuristic.into_iter().map(|(_, m)| m).collect();
        fb.log_excerpt = excerpt();
        return LogOutcome::Feedback(fb);
    }

    let exited_badly = exit.status != Some(0);
    if exited_badly {
        if let Some(line) = first_line(raw_log, &p.runtime) {
            let mut fb = StructuredFeedback::new(FailureClass::RuntimeError, line);
            fb.log_excerpt = excerpt();
            return LogOutcome::Feedback(fb);
        }
    }

    let has_pass = raw_log.lines().any(|l| p.pass.is_match(l));
    if has_pass && exit.success() {
        return LogOutcome::Pass;
    }

    let message = if exited_badly {
        match exit.status {
            Some(code) => format!("simulation exited with status {code}"),
            None => "simulation terminated by a signal".to_string(),
        }
    } else if has_pass {
        "pass marker present but exit status was not zero".to_string()
    } else {
        "simulation finished without a pass marker".to_string()
    };
    let mut fb = StructuredFeedback::new(FailureClass::Unclassified, message);
    fb.log_excerpt = excerpt();
    LogOutcome::Feedback(fb)
}

fn floor_char_boundary(s: &str, mut idx: usize) -> usize {
    idx = idx.min(s.len());
    while !s.is_char_boundary(idx) {
        idx -= 1;
    }
    idx
}

/// Truncates `log` to at most `max_bytes`, keeping the head of the log and
/// then every pass/failure line that still fits, in original order. The
/// first failing line survives whenever it is shorter than the budget.
pub fn truncate_log(log: &str, max_bytes: usize) -> String {
    if log.len() <= max_bytes {
        return log.to_string();
    }
    if max_bytes <= TRUNCATION_MARKER.len() {
        return log[..floor_char_boundary(log, max_bytes)].to_string();
    }
    let budget = max_bytes - TRUNCATION_MARKER.len();
    let p = patterns();
    let priority: Vec<(usize, &str)> = {
        let mut offset = 0;
        let mut v = Vec::new();
        for line in log.split_inclusive('\n') {
            if is_failure_line(line) || p.pass.is_match(line) {
                v.push((offset, line));
            }
            offset += line.len();
        }
        v
    };

    // Reserve room for the first priority line, then give the head half of
    // what remains.
    let first_len = priority.first().map_or(0, |(_, l)| l.len());
    let reserve = if first_len < budget { first_len } else { 0 };
    let head_budget = (budget - reserve) / 2;
    let mut head_end = 0;
    for line in log.split_inclusive('\n') {
        if head_end + line.len() > head_budget {
            break;
        }
        head_end += line.len();
    }
    let mut out = String::with_capacity(max_bytes);
    out.push_str(&log[..head_end]);
    let mut tail = String::new();
    let mut used = head_end;
    for (offset, line) in priority {
        if offset < head_end {
            continue;
        }
        if used + line.len() > budget {
            if tail.is_empty() && used < budget {
                let cut = floor_char_boundary(line, budget - used);
                tail.push_str(&line[..cut]);
            }
            break;
        }
        tail.push_str(line);
        used += line.len();
    }
    out.push_str(TRUNCATION_MARKER);
    out.push_str(&tail);
    debug_assert!(out.len() <= max_bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feedback(out: LogOutcome) -> StructuredFeedback {
        match out {
            LogOutcome::Feedback(f) => f,
            LogOutcome::Pass => panic!("expected feedback, got pass"),
        }
    }

    #[test]
    fn tb_fail_line_becomes_output_mismatch() {
        let fb = feedback(parse_log(
            "TB_FAIL signal=sum time=40 expected=8 actual=7\n",
            ExitInfo::code(0),
        ));
        assert_eq!(fb.failure_class, FailureClass::OutputMismatch);
        assert_eq!(
            fb.mismatches,
            vec![SignalMismatch {
                signal: "sum".into(),
                time: Some(40),
                expected: "8".into(),
                actual: "7".into(),
            }]
        );
    }

    #[test]
    fn pass_needs_marker_and_zero_status() {
        assert_eq!(parse_log("TB_PASS\n", ExitInfo::code(0)), LogOutcome::Pass);
        let fb = feedback(parse_log("TB_PASS\n", ExitInfo::code(1)));
        assert_eq!(fb.failure_class, FailureClass::Unclassified);
        let fb = feedback(parse_log("all done\n", ExitInfo::code(0)));
        assert_eq!(fb.failure_class, FailureClass::Unclassified);
    }

    #[test]
    fn assertion_line_is_the_message() {
        let line = "ASSERTION FAILED at time 120: req without grant";
        let fb = feedback(parse_log(line, ExitInfo::code(0)));
        assert_eq!(fb.failure_class, FailureClass::AssertionFail);
        assert!(fb.mismatches.is_empty());
        assert_eq!(fb.error_message, line);
    }

    #[test]
    fn verilator_error_task_counts_as_assertion() {
        let log = "[5] %Error: tb.v:2: Assertion failed in tb: req without grant\n%Error: tb.v:2: Verilog $stop\nAborting...\n";
        let fb = feedback(parse_log(log, ExitInfo::code(134)));
        assert_eq!(fb.failure_class, FailureClass::AssertionFail);
    }

    #[test]
    fn precedence_table() {
        let compile = "tb.v:3: syntax error\n";
        let assert_line = "TB_ASSERT grant dropped\n";
        let mismatch = "TB_FAIL signal=q time=5 expected=1 actual=0\n";
        let fatal = "FATAL: tb.v:9: bad state\n";

        let cases: Vec<(String, ExitInfo, FailureClass)> = vec![
            (format!("{compile}{assert_line}{mismatch}"), ExitInfo::timeout(), FailureClass::CompileError),
            (format!("{assert_line}{mismatch}"), ExitInfo::timeout(), FailureClass::Timeout),
            (format!("{mismatch}{assert_line}{fatal}"), ExitInfo::code(1), FailureClass::AssertionFail),
            (format!("{mismatch}{fatal}"), ExitInfo::code(1), FailureClass::OutputMismatch),
            (fatal.to_string(), ExitInfo::code(1), FailureClass::RuntimeError),
            (fatal.to_string(), ExitInfo::code(0), FailureClass::Unclassified),
            ("nothing useful\n".to_string(), ExitInfo::code(3), FailureClass::Unclassified),
        ];
        for (log, exit, want) in cases {
            assert_eq!(feedback(parse_log(&log, exit)).failure_class, want, "log: {log:?}");
        }
    }

    #[test]
    fn failure_lines_beat_a_pass_marker() {
        let log = "TB_FAIL signal=q time=5 expected=1 actual=0\nTB_PASS\n";
        let fb = feedback(parse_log(log, ExitInfo::code(0)));
        assert_eq!(fb.failure_class, FailureClass::OutputMismatch);
    }

    #[test]
    fn heuristic_expected_got() {
        let fb = feedback(parse_log(
            "Mismatch: dout expected 8'h3c, got 8'h00\n",
            ExitInfo::code(0),
        ));
        assert_eq!(fb.failure_class, FailureClass::OutputMismatch);
        assert_eq!(fb.mismatches[0].signal, "dout");
        assert_eq!(fb.mismatches[0].expected, "8'h3c");
        assert_eq!(fb.mismatches[0].actual, "8'h00");
    }

    #[test]
    fn equal_values_are_not_mismatches() {
        assert!(parse_tb_fail("TB_FAIL signal=a time=1 expected=3 actual=3").is_none());
    }

    #[test]
    fn truncation_keeps_first_failure() {
        let mut log = String::new();
        for i in 0..5000 {
            log.push_str(&format!("info line {i}\n"));
        }
        log.push_str("TB_FAIL signal=sum time=99 expected=1 actual=2\n");
        for i in 0..5000 {
            log.push_str(&format!("trailer {i}\n"));
        }
        let cut = truncate_log(&log, 4096);
        assert!(cut.len() <= 4096);
        assert!(cut.contains("TB_FAIL signal=sum time=99"));
        assert!(cut.contains("[log truncated]"));
        let fb = feedback(parse_log_with_limit(&log, ExitInfo::code(0), 4096));
        assert!(fb.log_excerpt.len() <= 4096);
    }

    proptest! {
        #[test]
        fn tb_fail_round_trip(
            signal in "[a-z_][a-z0-9_]{0,12}",
            time in proptest::option::of(0u64..1_000_000),
            expected in "[0-9a-fxz']{1,8}",
            actual in "[0-9a-fxz']{1,8}",
        ) {
            prop_assume!(expected != actual);
            let m = SignalMismatch { signal, time, expected, actual };
            prop_assert_eq!(parse_tb_fail(&format_tb_fail(&m)), Some(m));
        }

        #[test]
        fn never_pass_on_nonzero_exit(log in ".{0,200}", status in 1i32..255) {
            let with_marker = format!("{log}\nTB_PASS\n");
            prop_assert_ne!(parse_log(&with_marker, ExitInfo::code(status)), LogOutcome::Pass);
        }

        #[test]
        fn truncation_respects_budget(lines in proptest::collection::vec("[ -~]{0,120}", 0..400), max in 32usize..8192) {
            let log = lines.join("\n");
            prop_assert!(truncate_log(&log, max).len() <= max);
        }
    }
}
