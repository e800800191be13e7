//! Training-corpus curation: dedup, generated-code and size filters, syntax
//! validation, contamination filtering against benchmark solutions, and
//! specification/code pair generation.

mod heuristics;
mod pairs;
pub mod plant;
mod similarity;

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cancel::CancelToken;
use crate::sim::SimHarness;

pub use heuristics::machine_generated;
pub use pairs::{
    generate_pairs, ExamplePool, GeneratedPair, PairOutcome, PairRejection, PoolExample,
    Provenance,
};
pub use similarity::{jaccard, jaccard_sets, strip_comments, token_set, Closest, GoldenIndex, Granularity};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawScript {
    pub id: String,
    pub source: String,
    pub content: String,
    pub line_count: usize,
}

impl RawScript {
    pub fn new(id: impl Into<String>, source: impl Into<String>, content: impl Into<String>) -> Self {
        let content = content.into();
        Self {
            id: id.into(),
            source: source.into(),
            line_count: content.lines().count(),
            content,
        }
    }
}

/// Which stages run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub dedup: bool,
    pub machine_generated: bool,
    pub line_bounds: bool,
    pub syntax: bool,
    pub contamination: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            dedup: true,
            machine_generated: true,
            line_bounds: true,
            syntax: true,
            contamination: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgeConfig {
    pub min_lines: usize,
    pub max_lines: usize,
    /// Scripts strictly above this similarity to any reference are dropped.
    pub similarity_threshold: f64,
    pub granularity: Granularity,
    pub stages: StageToggles,
    pub banner_patterns: Vec<String>,
    pub banner_scan_lines: usize,
    /// Gate primitives per statement above which a file is a netlist.
    pub primitive_density: f64,
    /// Escaped identifiers per identifier above which names are synthesized.
    pub escaped_identifier_density: f64,
    /// Worker threads for syntax and similarity; `None` uses every core.
    pub workers: Option<usize>,
    pub seed: u64,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            min_lines: 30,
            max_lines: 2000,
            similarity_threshold: 0.8,
            granularity: Granularity::Word,
            stages: StageToggles::default(),
            banner_patterns: [
                "generated by",
                "do not edit",
                "auto-generated",
                "autogenerated",
                "automatically generated",
            ]
            .map(String::from)
            .to_vec(),
            banner_scan_lines: 30,
            primitive_density: 0.5,
            escaped_identifier_density: 0.3,
            workers: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("invalid forge config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: line {line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("contamination stage needs at least one reference solution")]
    EmptyGolden,
    #[error("syntax stage aborted: {0}")]
    Tool(String),
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<(), ForgeError> {
        if self.min_lines == 0 || self.min_lines >= self.max_lines {
            return Err(ForgeError::Config(format!(
                "need 0 < min_lines < max_lines, got {} and {}",
                self.min_lines, self.max_lines
            )));
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold <= 1.0) {
            return Err(ForgeError::Config(format!(
                "similarity_threshold must be in (0, 1], got {}",
                self.similarity_threshold
            )));
        }
        if self.workers == Some(0) {
            return Err(ForgeError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Dedup,
    MachineGenerated,
    LineBounds,
    Syntax,
    Contamination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RejectReason {
    Duplicate { of: String },
    Banner { pattern: String },
    Netlist { ratio: f64 },
    EscapedIdentifiers { ratio: f64 },
    TooShort { lines: usize },
    TooLong { lines: usize },
    Syntax { message: String },
    Contaminated { golden_id: String, similarity: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub input: usize,
    pub rejected: usize,
    pub retained: usize,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub stages: Vec<StageReport>,
}

impl FilterReport {
    pub fn stage(&self, stage: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn retained(&self) -> Option<usize> {
        self.stages.last().map(|s| s.retained)
    }

    /// Conservation within each stage and exact chaining between stages.
    pub fn is_consistent(&self) -> bool {
        self.stages.iter().all(|s| {
            s.input == s.rejected + s.retained && s.rejected == s.rejections.len()
        }) && self
            .stages
            .windows(2)
            .all(|w| w[1].input == w[0].retained)
    }
}

/// Applies per-script verdicts and records them as one stage.
fn apply(
    stage: Stage,
    corpus: Vec<RawScript>,
    verdicts: Vec<Option<RejectReason>>,
) -> (Vec<RawScript>, StageReport) {
    let input = corpus.len();
    let mut kept = Vec::new();
    let mut rejections = Vec::new();
    for (s, v) in corpus.into_iter().zip(verdicts) {
        match v {
            Some(reason) => rejections.push(Rejection { id: s.id, reason }),
            None => kept.push(s),
        }
    }
    let report = StageReport {
        stage,
        input,
        rejected: rejections.len(),
        retained: kept.len(),
        rejections,
    };
    (kept, report)
}

fn normalized_digest(content: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    for line in content.lines() {
        h.update(line.trim_end().as_bytes());
        h.update(b"\n");
    }
    h.finalize().into()
}

/// Keeps the first script per content digest, ignoring trailing whitespace.
pub fn dedup(corpus: Vec<RawScript>) -> (Vec<RawScript>, StageReport) {
    let mut seen: std::collections::HashMap<[u8; 32], String> = Default::default();
    let verdicts = corpus
        .iter()
        .map(|s| match seen.get(&normalized_digest(&s.content)) {
            Some(first) => Some(RejectReason::Duplicate { of: first.clone() }),
            None => {
                seen.insert(normalized_digest(&s.content), s.id.clone());
                None
            }
        })
        .collect();
    apply(Stage::Dedup, corpus, verdicts)
}

pub fn machine_generated_filter(
    corpus: Vec<RawScript>,
    config: &ForgeConfig,
) -> (Vec<RawScript>, StageReport) {
    let verdicts = corpus
        .iter()
        .map(|s| machine_generated(&s.content, config))
        .collect();
    apply(Stage::MachineGenerated, corpus, verdicts)
}

/// Keeps `min_lines <= line_count <= max_lines`.
pub fn line_filter(corpus: Vec<RawScript>, config: &ForgeConfig) -> (Vec<RawScript>, StageReport) {
    let verdicts = corpus
        .iter()
        .map(|s| {
            if s.line_count < config.min_lines {
                Some(RejectReason::TooShort { lines: s.line_count })
            } else if s.line_count > config.max_lines {
                Some(RejectReason::TooLong { lines: s.line_count })
            } else {
                None
            }
        })
        .collect();
    apply(Stage::LineBounds, corpus, verdicts)
}

/// Compile-only check of one file. `Ok(Some(msg))` is a syntax error;
/// `Err` means the tool itself failed.
pub trait SyntaxChecker: Sync {
    fn check(&self, source: &str, cancel: &CancelToken) -> Result<Option<String>, String>;
}

impl SyntaxChecker for SimHarness {
    fn check(&self, source: &str, cancel: &CancelToken) -> Result<Option<String>, String> {
        self.check_syntax(source, cancel)
            .map(|r| r.map(|fb| fb.error_message))
            .map_err(|e| e.to_string())
    }
}

fn pool(config: &ForgeConfig) -> Result<rayon::ThreadPool, ForgeError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = config.workers {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| ForgeError::Config(e.to_string()))
}

/// Drops scripts that fail a compile-only run. Any tool failure aborts the
/// whole stage.
pub fn syntax_filter(
    corpus: Vec<RawScript>,
    checker: &dyn SyntaxChecker,
    config: &ForgeConfig,
    cancel: &CancelToken,
) -> Result<(Vec<RawScript>, StageReport), ForgeError> {
    let results: Vec<Result<Option<String>, String>> = pool(config)?.install(|| {
        corpus
            .par_iter()
            .map(|s| checker.check(&s.content, cancel))
            .collect()
    });
    let verdicts = results
        .into_iter()
        .map(|r| {
            r.map(|m| m.map(|message| RejectReason::Syntax { message }))
                .map_err(ForgeError::Tool)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(apply(Stage::Syntax, corpus, verdicts))
}

/// Drops scripts whose similarity to some reference strictly exceeds the
/// threshold.
pub fn contamination_filter(
    corpus: Vec<RawScript>,
    golden: &[RawScript],
    config: &ForgeConfig,
) -> Result<(Vec<RawScript>, StageReport), ForgeError> {
    if golden.is_empty() {
        return Err(ForgeError::EmptyGolden);
    }
    let index = GoldenIndex::build(
        golden.iter().map(|g| (g.id.as_str(), g.content.as_str())),
        config.granularity,
    );
    let verdicts: Vec<Option<RejectReason>> = pool(config)?.install(|| {
        corpus
            .par_iter()
            .map(|s| {
                index
                    .closest(&s.content)
                    .filter(|c| c.similarity > config.similarity_threshold)
                    .map(|c| RejectReason::Contaminated {
                        golden_id: c.golden_id,
                        similarity: c.similarity,
                    })
            })
            .collect()
    });
    Ok(apply(Stage::Contamination, corpus, verdicts))
}

/// Every enabled stage in order.
pub fn run_pipeline(
    corpus: Vec<RawScript>,
    golden: &[RawScript],
    checker: &dyn SyntaxChecker,
    config: &ForgeConfig,
    cancel: &CancelToken,
) -> Result<(Vec<RawScript>, FilterReport), ForgeError> {
    config.validate()?;
    if config.stages.contamination && golden.is_empty() {
        return Err(ForgeError::EmptyGolden);
    }
    let mut report = FilterReport::default();
    let mut corpus = corpus;
    let t = &config.stages;
    if t.dedup {
        let (c, r) = dedup(corpus);
        corpus = c;
        report.stages.push(r);
    }
    if t.machine_generated {
        let (c, r) = machine_generated_filter(corpus, config);
        corpus = c;
        report.stages.push(r);
    }
    if t.line_bounds {
        let (c, r) = line_filter(corpus, config);
        corpus = c;
        report.stages.push(r);
    }
    if t.syntax {
        let (c, r) = syntax_filter(corpus, checker, config, cancel)?;
        corpus = c;
        report.stages.push(r);
    }
    if t.contamination {
        let (c, r) = contamination_filter(corpus, golden, config)?;
        corpus = c;
        report.stages.push(r);
    }
    Ok((corpus, report))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ForgeError + '_ {
    move |source| ForgeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn collect_hdl(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ForgeError> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            collect_hdl(root, &path, out)?;
        } else if path
            .extension()
            .is_some_and(|e| e == "v" || e == "sv")
        {
            out.push(path);
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct ManifestLine {
    id: String,
    content: String,
    #[serde(default)]
    source: Option<String>,
}

/// Reads a corpus from a directory tree of `.v`/`.sv` files (ids are the
/// relative paths, sorted) or from a JSONL manifest of `{id, content}`.
pub fn load_corpus(path: &Path) -> Result<Vec<RawScript>, ForgeError> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_hdl(path, path, &mut files)?;
        files.sort();
        return files
            .into_iter()
            .map(|f| {
                let bytes = fs::read(&f).map_err(io_err(&f))?;
                let content = String::from_utf8_lossy(&bytes).into_owned();
                let id = f
                    .strip_prefix(path)
                    .unwrap_or(&f)
                    .to_string_lossy()
                    .replace('\\', "/");
                Ok(RawScript::new(id, f.display().to_string(), content))
            })
            .collect();
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(line).map_err(|e| ForgeError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(m.id.clone()) {
            return Err(ForgeError::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("duplicate id {}", m.id),
            });
        }
        let source = m.source.unwrap_or_else(|| format!("{}#{}", path.display(), i + 1));
        out.push(RawScript::new(m.id, source, m.content));
    }
    Ok(out)
}

/// Writes scripts as JSONL.
pub fn write_manifest(path: &Path, scripts: &[RawScript]) -> Result<(), ForgeError> {
    let mut out = String::new();
    for s in scripts {
        out.push_str(&serde_json::to_string(s).expect("script serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}
