use std::sync::OnceLock;

use regex::Regex;

use super::similarity::strip_comments;
use super::{ForgeConfig, RejectReason};

fn primitive_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?m)^\s*(and|or|nand|nor|xor|xnor|not|buf|bufif0|bufif1|notif0|notif1)\b\s*(#\s*\([^)]*\)\s*)?[A-Za-z_\\][^\s(]*\s*\(",
        )
        .unwrap()
    })
}

fn escaped_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\\S+").unwrap())
}

fn ident_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\\S+|[A-Za-z_][A-Za-z0-9_$]*").unwrap())
}

/// Returns why `content` looks tool-generated, if it does.
///
/// ```
/// use hdlagent::forge::{machine_generated, ForgeConfig};
///
/// let c = ForgeConfig::default();
/// assert!(machine_generated("// Generated by synth. Do not edit.\nmodule m; endmodule\n", &c).is_some());
/// assert!(machine_generated("module m(input a, output b);\nassign b = a;\nendmodule\n", &c).is_none());
/// ```
pub fn machine_generated(content: &str, config: &ForgeConfig) -> Option<RejectReason> {
    let head: String = content
        .lines()
        .take(config.banner_scan_lines)
        .collect::<Vec<_>>()
        .join("\n")
        .to_lowercase();
    let comments: Vec<&str> = head
        .lines()
        .filter_map(|l| {
            let t = l.trim_start();
            (t.starts_with("//") || t.starts_with("/*") || t.starts_with('*')).then_some(t)
        })
        .collect();
    for pattern in &config.banner_patterns {
        let p = pattern.to_lowercase();
        if comments.iter().any(|c| c.contains(&p)) {
            return Some(RejectReason::Banner {
                pattern: pattern.clone(),
            });
        }
    }

    let code = strip_comments(content);
    let statements = code.matches(';').count();
    if statements > 0 {
        let primitives = primitive_re().find_iter(&code).count();
        let ratio = primitives as f64 / statements as f64;
        if ratio > config.primitive_density {
            return Some(RejectReason::Netlist { ratio });
        }
    }
    let idents = ident_re().find_iter(&code).count();
    if idents > 0 {
        let escaped = escaped_re().find_iter(&code).count();
        let ratio = escaped as f64 / idents as f64;
        if ratio > config.escaped_identifier_density {
            return Some(RejectReason::EscapedIdentifiers { ratio });
        }
    }
    None
}
