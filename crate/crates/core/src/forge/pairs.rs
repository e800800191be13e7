use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ForgeConfig, ForgeError, GoldenIndex, RawScript, SyntaxChecker};
use crate::cancel::CancelToken;
use crate::generator::{fill, verilog_blocks};
use crate::llm::{ChatBackend, ChatMessage, ChatRequest, DEFAULT_GENERATOR_TEMPERATURE};
use crate::model::TaskCategory;

const SYSTEM: &str = include_str!("../../templates/forge_system.txt");
const USER: &str = include_str!("../../templates/forge_user.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolExample {
    pub specification: String,
    pub golden_code: String,
    pub kind: TaskCategory,
}

/// Hand-picked examples shown to the backend as the target format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePool {
    pub examples: Vec<PoolExample>,
}

impl ExamplePool {
    /// Non-empty, and every golden implementation compiles.
    pub fn new(
        examples: Vec<PoolExample>,
        checker: &dyn SyntaxChecker,
        cancel: &CancelToken,
    ) -> Result<Self, ForgeError> {
        if examples.is_empty() {
            return Err(ForgeError::Config("example pool is empty".into()));
        }
        for (i, e) in examples.iter().enumerate() {
            match checker.check(&e.golden_code, cancel) {
                Ok(None) => {}
                Ok(Some(msg)) => {
                    return Err(ForgeError::Config(format!("pool example {i} does not compile: {msg}")))
                }
                Err(msg) => return Err(ForgeError::Tool(msg)),
            }
        }
        Ok(Self { examples })
    }

    /// JSONL of `{specification, golden_code, kind}`.
    pub fn load(path: &Path, checker: &dyn SyntaxChecker, cancel: &CancelToken) -> Result<Self, ForgeError> {
        let text = fs::read_to_string(path).map_err(|source| ForgeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            examples.push(serde_json::from_str(line).map_err(|e| ForgeError::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Self::new(examples, checker, cancel)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub script_id: String,
    pub pool_index: usize,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedPair {
    #[serde(rename = "spec")]
    pub specification: String,
    pub golden_code: String,
    pub kind: TaskCategory,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum PairRejection {
    Backend { message: String },
    Format { message: String },
    Syntax { message: String },
    Contamination { golden_id: String, similarity: f64 },
    Tool { message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub accepted: Vec<GeneratedPair>,
    pub rejection: Option<PairRejection>,
}

impl PairOutcome {
    fn rejected(r: PairRejection) -> Self {
        tracing::info!("pair rejected: {r:?}");
        Self {
            accepted: Vec::new(),
            rejection: Some(r),
        }
    }
}

fn needs_faulty(kind: TaskCategory) -> bool {
    matches!(kind, TaskCategory::CodeModification | TaskCategory::CodeDebugging)
}

/// Picks the pool example for `script`; depends only on the seed and the
/// script id, not on corpus order.
fn pick(pool: &ExamplePool, script_id: &str, seed: u64) -> usize {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(script_id.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest).gen_range(0..pool.len())
}

fn build_request(script: &RawScript, example: &PoolExample) -> ChatRequest {
    let faulty = match example.kind {
        TaskCategory::CodeDebugging => {
            "\nBefore the implementation, add a second fenced verilog block with an intentionally faulty version of it."
        }
        TaskCategory::CodeModification => {
            "\nBefore the implementation, add a second fenced verilog block with a simplified version of it."
        }
        _ => "",
    };
    let user = fill(
        USER,
        &[
            ("kind", example.kind.tag()),
            ("example_spec", example.specification.trim_end()),
            ("example_code", example.golden_code.trim_end()),
            ("script", script.content.trim_end()),
            ("faulty", faulty),
        ],
    );
    ChatRequest::new(
        "forge",
        vec![ChatMessage::system(SYSTEM.trim_end()), ChatMessage::user(user.trim_end())],
        DEFAULT_GENERATOR_TEMPERATURE,
    )
}

fn spec_section(reply: &str) -> Option<String> {
    let start = reply.find("SPECIFICATION:")? + "SPECIFICATION:".len();
    let rest = &reply[start..];
    let end = rest.find("```").unwrap_or(rest.len());
    let spec = rest[..end].trim();
    (!spec.is_empty()).then(|| spec.to_string())
}

/// Asks the backend for one specification/implementation pair modelled on
/// a sampled pool example. The implementation must compile and must not be
/// a near-copy of any reference solution.
pub fn generate_pairs(
    script: &RawScript,
    pool: &ExamplePool,
    backend: &dyn ChatBackend,
    checker: &dyn SyntaxChecker,
    golden: &GoldenIndex,
    config: &ForgeConfig,
    cancel: &CancelToken,
) -> PairOutcome {
    let pool_index = pick(pool, &script.id, config.seed);
    let example = &pool.examples[pool_index];
    let reply = match backend.complete(&build_request(script, example)) {
        Ok(r) => r,
        Err(e) => return PairOutcome::rejected(PairRejection::Backend { message: e.to_string() }),
    };
    let Some(mut specification) = spec_section(&reply.content) else {
        return PairOutcome::rejected(PairRejection::Format {
            message: "no SPECIFICATION section".into(),
        });
    };
    let blocks = verilog_blocks(&reply.content);
    let Some(golden_code) = blocks.last().cloned() else {
        return PairOutcome::rejected(PairRejection::Format {
            message: "no code block".into(),
        });
    };
    if needs_faulty(example.kind) {
        if blocks.len() < 2 {
            return PairOutcome::rejected(PairRejection::Format {
                message: "missing the faulty or simplified version".into(),
            });
        }
        specification.push_str("\n\nExisting code:\n```verilog\n");
        specification.push_str(blocks[0].trim_end());
        specification.push_str("\n```");
    }
    match checker.check(&golden_code, cancel) {
        Ok(None) => {}
        Ok(Some(message)) => return PairOutcome::rejected(PairRejection::Syntax { message }),
        Err(message) => return PairOutcome::rejected(PairRejection::Tool { message }),
    }
    if let Some(c) = golden.closest(&golden_code) {
        if c.similarity > config.similarity_threshold {
            return PairOutcome::rejected(PairRejection::Contamination {
                golden_id: c.golden_id,
                similarity: c.similarity,
            });
        }
    }
    PairOutcome {
        accepted: vec![GeneratedPair {
            specification,
            golden_code,
            kind: example.kind,
            provenance: Provenance {
                script_id: script.id.clone(),
                pool_index,
                backend_id: reply.backend_id,
            },
        }],
        rejection: None,
    }
}
