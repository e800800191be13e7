//! Generator prompt assembly and code extraction.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::EvolvingContext;
use crate::llm::{ChatBackend, ChatMessage, ChatRequest, LlmError, DEFAULT_GENERATOR_TEMPERATURE};
use crate::model::{AttemptKind, RtlTask};

const SYSTEM: &str = include_str!("../templates/generator_system.txt");
const OUTPUT: &str = include_str!("../templates/generator_output.txt");

pub const DEFAULT_PROMPT_BUDGET: usize = 100_000;

/// Replaces `{{key}}` placeholders.
pub(crate) fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    /// Characters across all messages.
    pub prompt_budget: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_GENERATOR_TEMPERATURE,
            max_tokens: 8192,
            prompt_budget: DEFAULT_PROMPT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorPrompt {
    pub system: String,
    pub spec: String,
    pub prior_code: Option<String>,
    pub context_render: String,
    pub attempt_kind: AttemptKind,
    pub top_module: String,
}

impl GeneratorPrompt {
    /// The user message: spec, prior code, context, output format.
    pub fn user_text(&self) -> String {
        let mut out = format!("SPECIFICATION\n{}\n", self.spec.trim_end());
        if let Some(code) = &self.prior_code {
            out.push_str(&format!("\nEXISTING CODE\n```verilog\n{}\n```\n", code.trim_end()));
        }
        if !self.context_render.is_empty() {
            let heading = match self.attempt_kind {
                AttemptKind::Restart => "LESSONS FROM DISCARDED ATTEMPTS",
                _ => "PREVIOUS ATTEMPTS",
            };
            out.push_str(&format!("\n{heading}\n{}", self.context_render));
            if !self.context_render.ends_with('\n') {
                out.push('\n');
            }
        }
        out.push('\n');
        out.push_str(&fill(OUTPUT, &[("top_module", &self.top_module)]));
        out
    }

    pub fn len(&self) -> usize {
        self.system.chars().count() + self.user_text().chars().count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_request(&self, config: &GeneratorConfig) -> ChatRequest {
        let mut req = ChatRequest::new(
            "generator",
            vec![
                ChatMessage::system(self.system.clone()),
                ChatMessage::user(self.user_text()),
            ],
            config.temperature,
        );
        req.max_tokens = config.max_tokens;
        req
    }
}

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("prompt has {len} characters, budget is {budget}")]
    PromptOverflow { len: usize, budget: usize },
    #[error("reply contains no Verilog code")]
    NoCodeBlock,
    #[error(transparent)]
    Gateway(#[from] LlmError),
}

/// Assembles the prompt. Fresh attempts carry no context, restarts only the
/// distilled insights, repairs the history rendered at `depth`.
pub fn build_prompt(
    task: &RtlTask,
    context: &EvolvingContext,
    kind: AttemptKind,
    depth: usize,
    budget: usize,
) -> Result<GeneratorPrompt, GenerateError> {
    let context_render = match kind {
        AttemptKind::Fresh => String::new(),
        AttemptKind::Restart => context.render_insights(),
        AttemptKind::Repair => context.render(depth),
    };
    let prompt = GeneratorPrompt {
        system: SYSTEM.trim_end().to_string(),
        spec: task.specification.clone(),
        prior_code: task.prior_code.clone(),
        context_render,
        attempt_kind: kind,
        top_module: task.top_module.clone(),
    };
    let len = prompt.len();
    if len > budget {
        return Err(GenerateError::PromptOverflow { len, budget });
    }
    Ok(prompt)
}

/// One gateway call, reply piped through [`extract_code`].
pub fn generate(
    prompt: &GeneratorPrompt,
    backend: &dyn ChatBackend,
    config: &GeneratorConfig,
) -> Result<String, GenerateError> {
    let reply = backend.complete(&prompt.to_request(config))?;
    extract_code(&reply.content)
}

struct Fence {
    info: String,
    body: String,
}

fn fences(text: &str) -> Vec<Fence> {
    static OPEN: OnceLock<Regex> = OnceLock::new();
    let open = OPEN.get_or_init(|| Regex::new(r"^\s{0,3}(`{3,}|~{3,})\s*([^`\s]*)").unwrap());
    let mut out = Vec::new();
    let mut current: Option<(String, String, Vec<&str>)> = None;
    for line in text.lines() {
        match &mut current {
            None => {
                if let Some(c) = open.captures(line) {
                    current = Some((c[1].to_string(), c[2].to_ascii_lowercase(), Vec::new()));
                }
            }
            Some((marker, info, body)) => {
                let t = line.trim();
                if t.starts_with(marker.as_str())
                    && t.chars().all(|ch| ch == marker.chars().next().unwrap())
                {
                    out.push(Fence {
                        info: std::mem::take(info),
                        body: body.join("\n"),
                    });
                    current = None;
                } else {
                    body.push(line);
                }
            }
        }
    }
    out
}

fn module_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bmodule\b").unwrap())
}

/// Picks the code out of a reply: the last block tagged verilog or
/// systemverilog, else the last block mentioning `module`, else the span
/// from the first `module` to the last `endmodule`.
///
/// ```
/// use hdlagent::generator::extract_code;
///
/// let reply = "```\nx=1\n```\n```verilog\nmodule b; endmodule\n```";
/// assert_eq!(extract_code(reply).unwrap(), "module b; endmodule");
/// assert!(extract_code("text only, no code").is_err());
/// ```
pub fn extract_code(reply: &str) -> Result<String, GenerateError> {
    let blocks = fences(reply);
    let tagged = |f: &&Fence| matches!(f.info.as_str(), "verilog" | "systemverilog" | "v" | "sv");
    if let Some(f) = blocks.iter().rev().find(tagged) {
        return Ok(f.body.clone());
    }
    if let Some(f) = blocks.iter().rev().find(|f| module_re().is_match(&f.body)) {
        return Ok(f.body.clone());
    }
    if let (Some(start), Some(end)) = (module_re().find(reply), reply.rfind("endmodule")) {
        if end >= start.start() {
            return Ok(reply[start.start()..end + "endmodule".len()].to_string());
        }
    }
    Err(GenerateError::NoCodeBlock)
}

/// Bodies of every fenced block that is tagged as Verilog or mentions
/// `module`, in reply order.
pub(crate) fn verilog_blocks(reply: &str) -> Vec<String> {
    fences(reply)
        .into_iter()
        .filter(|f| {
            matches!(f.info.as_str(), "verilog" | "systemverilog" | "v" | "sv")
                || module_re().is_match(&f.body)
        })
        .map(|f| f.body)
        .collect()
}

/// Inverse of [`extract_code`] for code without fences.
pub fn wrap_in_verilog_fence(code: &str) -> String {
    format!("```verilog\n{code}\n```")
}
