//! Deterministic backend driven by a declarative rule file.
//!
//! ```json
//! {"rules": [
//!   {"when": {"tag": "generator", "contains": ["FIX:"]}, "reply_file": "golden.v", "wrap": "verilog"},
//!   {"when": {"tag": "generator"}, "reply_file": "buggy.v", "wrap": "verilog"},
//!   {"when": {"tag": "reflector"}, "reply": "ROOT_CAUSE: ...\nFIX_GUIDANCE: FIX: ..."}
//! ]}
//! ```
//!
//! Rules are tried in order against the last user message; the first match
//! answers. `call` bounds the 1-based per-tag call counter, `seed` restricts
//! a rule to one parallel process and `times` caps how often a rule fires.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, ChatResponse, LlmError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRange {
    #[serde(default)]
    pub min: Option<u64>,
    #[serde(default)]
    pub max: Option<u64>,
}

impl CallRange {
    fn contains(&self, n: u64) -> bool {
        self.min.is_none_or(|m| n >= m) && self.max.is_none_or(|m| n <= m)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct When {
    pub tag: Option<String>,
    /// Every substring must occur.
    pub contains: Vec<String>,
    /// No substring may occur.
    pub absent: Vec<String>,
    pub regex: Option<String>,
    pub seed: Option<u64>,
    pub call: Option<CallRange>,
}

/// Reply text, inline or from a file relative to the script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reply {
    Inline { reply: String },
    File { reply_file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    #[serde(default)]
    pub when: When,
    #[serde(default)]
    pub times: Option<u64>,
    #[serde(flatten)]
    pub reply: Reply,
    /// Wraps the reply in a fenced block with this info string.
    #[serde(default)]
    pub wrap: Option<String>,
}

impl Rule {
    pub fn reply(text: impl Into<String>) -> Self {
        Self {
            when: When::default(),
            times: None,
            reply: Reply::Inline { reply: text.into() },
            wrap: None,
        }
    }

    pub fn tag(mut self, tag: &str) -> Self {
        self.when.tag = Some(tag.into());
        self
    }

    pub fn contains(mut self, needle: &str) -> Self {
        self.when.contains.push(needle.into());
        self
    }

    pub fn absent(mut self, needle: &str) -> Self {
        self.when.absent.push(needle.into());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.when.seed = Some(seed);
        self
    }

    pub fn calls(mut self, min: Option<u64>, max: Option<u64>) -> Self {
        self.when.call = Some(CallRange { min, max });
        self
    }

    pub fn times(mut self, n: u64) -> Self {
        self.times = Some(n);
        self
    }

    pub fn wrap(mut self, info: &str) -> Self {
        self.wrap = Some(info.into());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub rules: Vec<Rule>,
}

impl Script {
    pub fn new(rules: Vec<Rule>) -> Self {
        Self { rules }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let err = |message: String| LlmError::Load {
            context: format!("script {}", path.display()),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut script: Script = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for rule in &mut script.rules {
            if let Reply::File { reply_file } = &rule.reply {
                let full = base.join(reply_file);
                let reply = fs::read_to_string(&full)
                    .map_err(|e| err(format!("{}: {e}", full.display())))?;
                rule.reply = Reply::Inline { reply };
            }
        }
        Ok(script)
    }
}

struct Compiled {
    rule: Rule,
    regex: Option<Regex>,
    text: String,
}

#[derive(Default)]
struct Counters {
    calls: HashMap<String, u64>,
    uses: Vec<u64>,
}

pub struct ScriptedBackend {
    rules: Vec<Compiled>,
    seed: u64,
    state: Mutex<Counters>,
}

impl ScriptedBackend {
    pub fn new(script: Script, seed: u64) -> Result<Self, LlmError> {
        let mut rules = Vec::with_capacity(script.rules.len());
        for rule in script.rules {
            let regex = match &rule.when.regex {
                Some(p) => Some(Regex::new(p).map_err(|e| LlmError::Load {
                    context: "script rule regex".into(),
                    message: e.to_string(),
                })?),
                None => None,
            };
            let body = match &rule.reply {
                Reply::Inline { reply } => reply.clone(),
                Reply::File { reply_file } => {
                    return Err(LlmError::Load {
                        context: "script rule".into(),
                        message: format!("unresolved reply_file {}", reply_file.display()),
                    })
                }
            };
            let text = match &rule.wrap {
                Some(info) => {
                    let body = body.strip_suffix('\n').unwrap_or(&body);
                    format!("```{info}\n{body}\n```")
                }
                None => body,
            };
            rules.push(Compiled { rule, regex, text });
        }
        let n = rules.len();
        Ok(Self {
            rules,
            seed,
            state: Mutex::new(Counters {
                calls: HashMap::new(),
                uses: vec![0; n],
            }),
        })
    }

    /// Calls seen so far for `tag`.
    pub fn calls(&self, tag: &str) -> u64 {
        self.state.lock().unwrap().calls.get(tag).copied().unwrap_or(0)
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> String {
        format!("scripted:{}", self.seed)
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let start = Instant::now();
        let text = request.last_user();
        let mut state = self.state.lock().unwrap();
        let call = {
            let c = state.calls.entry(request.tag.clone()).or_insert(0);
            *c += 1;
            *c
        };
        let hit = self.rules.iter().enumerate().find(|(i, c)| {
            let w = &c.rule.when;
            w.tag.as_ref().is_none_or(|t| *t == request.tag)
                && w.seed.is_none_or(|s| s == self.seed)
                && w.call.is_none_or(|r| r.contains(call))
                && c.rule.times.is_none_or(|t| state.uses[*i] < t)
                && w.contains.iter().all(|s| text.contains(s.as_str()))
                && !w.absent.iter().any(|s| text.contains(s.as_str()))
                && c.regex.as_ref().is_none_or(|r| r.is_match(text))
        });
        let Some((i, c)) = hit else {
            return Err(LlmError::ScriptNoMatch {
                tag: request.tag.clone(),
                call,
            });
        };
        state.uses[i] += 1;
        Ok(ChatResponse {
            content: c.text.clone(),
            backend_id: self.id(),
            latency: start.elapsed().as_secs_f64(),
            token_usage: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatMessage;

    fn ask(b: &ScriptedBackend, tag: &str, text: &str) -> Result<String, LlmError> {
        b.complete(&ChatRequest::new(tag, vec![ChatMessage::user(text)], 1.2))
            .map(|r| r.content)
    }

    #[test]
    fn catch_all_rule() {
        let b = ScriptedBackend::new(
            Script::new(vec![Rule::reply("```verilog\nmodule m; endmodule\n```")]),
            0,
        )
        .unwrap();
        assert_eq!(ask(&b, "generator", "anything").unwrap(), "```verilog\nmodule m; endmodule\n```");
    }

    #[test]
    fn first_match_wins_and_constraints_apply() {
        let b = ScriptedBackend::new(
            Script::new(vec![
                Rule::reply("fixed").tag("generator").contains("GUIDE"),
                Rule::reply("late").tag("generator").calls(Some(3), None),
                Rule::reply("buggy").tag("generator"),
                Rule::reply("diag").tag("reflector"),
            ]),
            0,
        )
        .unwrap();
        assert_eq!(ask(&b, "generator", "spec").unwrap(), "buggy");
        assert_eq!(ask(&b, "reflector", "x").unwrap(), "diag");
        assert_eq!(ask(&b, "generator", "spec").unwrap(), "buggy");
        assert_eq!(ask(&b, "generator", "spec").unwrap(), "late");
        assert_eq!(ask(&b, "generator", "GUIDE").unwrap(), "fixed");
        assert_eq!(b.calls("generator"), 4);
        assert!(matches!(
            ask(&b, "coordinator", "x"),
            Err(LlmError::ScriptNoMatch { call: 1, .. })
        ));
    }

    #[test]
    fn seed_times_and_wrap() {
        let script = Script::new(vec![
            Rule::reply("module a; endmodule\n").seed(1).wrap("verilog"),
            Rule::reply("once").times(1),
            Rule::reply("after"),
        ]);
        let one = ScriptedBackend::new(script.clone(), 1).unwrap();
        assert_eq!(ask(&one, "g", "x").unwrap(), "```verilog\nmodule a; endmodule\n```");
        let two = ScriptedBackend::new(script, 2).unwrap();
        assert_eq!(ask(&two, "g", "x").unwrap(), "once");
        assert_eq!(ask(&two, "g", "x").unwrap(), "after");
    }

    #[test]
    fn loads_json_with_reply_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.v"), "module a; endmodule\n").unwrap();
        fs::write(
            dir.path().join("s.json"),
            r#"{"rules":[{"when":{"regex":"^w.*d$"},"reply_file":"a.v","wrap":"verilog"},{"reply":"no"}]}"#,
        )
        .unwrap();
        let b = ScriptedBackend::new(Script::load(&dir.path().join("s.json")).unwrap(), 0).unwrap();
        assert_eq!(ask(&b, "g", "word").unwrap(), "```verilog\nmodule a; endmodule\n```");
        assert_eq!(ask(&b, "g", "other").unwrap(), "no");
    }

    #[test]
    fn identical_sequences_give_identical_replies() {
        let script = Script::new(vec![
            Rule::reply("a").calls(None, Some(2)),
            Rule::reply("b"),
        ]);
        let run = || {
            let b = ScriptedBackend::new(script.clone(), 0).unwrap();
            (0..5).map(|_| ask(&b, "g", "q").unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        assert_eq!(run(), ["a", "a", "b", "b", "b"]);
    }
}
