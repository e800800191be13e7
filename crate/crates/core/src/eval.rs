//! Pass@1 and Agentic Pass Rate over a problem x run success grid, and the
//! report documents built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TaskCategory;
use crate::orchestrator::{
    iteration_accounting, IterationPair, IterationStats, OutcomeFile, RunRole, OUTCOME_FILE,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemRow {
    pub id: String,
    pub category: TaskCategory,
    pub results: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMatrix {
    pub problems: Vec<ProblemRow>,
    pub runs_per_problem: usize,
    /// Each run is one agentic attempt per problem. With a single run the
    /// two metrics coincide and reports show only APR.
    #[serde(default)]
    pub agentic: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("runs_per_problem must be at least 1")]
    NoRuns,
    #[error("problem {id} has {got} results, expected {expected}")]
    Ragged { id: String, got: usize, expected: usize },
    #[error("problem {0} appears twice")]
    DuplicateProblem(String),
    #[error("unknown report format {0:?}")]
    UnknownFormat(String),
    #[error("no outcome files under {0}")]
    NoOutcomes(PathBuf),
}

impl RunMatrix {
    pub fn new(problems: Vec<ProblemRow>, runs_per_problem: usize) -> Result<Self, EvalError> {
        let m = Self {
            problems,
            runs_per_problem,
            agentic: false,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.runs_per_problem == 0 {
            return Err(EvalError::NoRuns);
        }
        let mut seen = BTreeSet::new();
        for p in &self.problems {
            if p.results.len() != self.runs_per_problem {
                return Err(EvalError::Ragged {
                    id: p.id.clone(),
                    got: p.results.len(),
                    expected: self.runs_per_problem,
                });
            }
            if !seen.insert(&p.id) {
                return Err(EvalError::DuplicateProblem(p.id.clone()));
            }
        }
        Ok(())
    }

    fn categories(&self) -> BTreeMap<TaskCategory, Vec<&ProblemRow>> {
        let mut out: BTreeMap<TaskCategory, Vec<&ProblemRow>> = BTreeMap::new();
        for p in &self.problems {
            out.entry(p.category).or_default().push(p);
        }
        out
    }
}

/// Per-category percentages plus the overall figure. Categories without
/// problems are absent; `overall` is `None` for an empty matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub per_category: BTreeMap<TaskCategory, f64>,
    pub overall: Option<f64>,
}

fn metric(matrix: &RunMatrix, score: impl Fn(&ProblemRow) -> f64) -> Metric {
    let mean = |rows: &[&ProblemRow]| rows.iter().map(|p| score(p)).sum::<f64>() / rows.len() as f64 * 100.0;
    let per_category = matrix
        .categories()
        .into_iter()
        .map(|(c, rows)| (c, mean(&rows)))
        .collect();
    let all: Vec<&ProblemRow> = matrix.problems.iter().collect();
    if all.is_empty() {
        tracing::warn!("run matrix has no problems");
    }
    Metric {
        per_category,
        overall: (!all.is_empty()).then(|| mean(&all)),
    }
}

/// Mean over problems of the per-problem success rate, in percent.
///
/// ```
/// use hdlagent::eval::{pass_at_1, ProblemRow, RunMatrix};
/// use hdlagent::model::TaskCategory;
///
/// let row = |id: &str, k: usize| ProblemRow {
///     id: id.into(),
///     category: TaskCategory::SpecToRtl,
///     results: (0..5).map(|i| i < k).collect(),
/// };
/// let m = RunMatrix::new(vec![row("a", 3), row("b", 5), row("c", 0)], 5).unwrap();
/// assert!((pass_at_1(&m).overall.unwrap() - 53.333).abs() < 1e-3);
/// ```
pub fn pass_at_1(matrix: &RunMatrix) -> Metric {
    let r = matrix.runs_per_problem as f64;
    metric(matrix, |p| p.results.iter().filter(|&&x| x).count() as f64 / r)
}

/// Share of problems solved in at least one run, in percent.
pub fn apr(matrix: &RunMatrix) -> Metric {
    metric(matrix, |p| if p.results.iter().any(|&x| x) { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    /// Category tag, or `overall`.
    pub category: String,
    pub problems: usize,
    /// Absent when suppressed for agentic single-run matrices.
    pub pass_at_1: Option<f64>,
    pub apr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub runs_per_problem: usize,
    pub agentic: bool,
    pub rows: Vec<CategoryRow>,
    pub iterations: Option<IterationStats>,
}

impl MetricReport {
    pub fn build(matrix: &RunMatrix, iterations: Option<IterationStats>) -> Self {
        let p1 = pass_at_1(matrix);
        let ap = apr(matrix);
        let suppress = matrix.agentic && matrix.runs_per_problem == 1;
        let counts = matrix.categories();
        let mut rows: Vec<CategoryRow> = ap
            .per_category
            .iter()
            .map(|(c, &a)| CategoryRow {
                category: c.tag().to_string(),
                problems: counts[c].len(),
                pass_at_1: (!suppress).then(|| p1.per_category[c]),
                apr: a,
            })
            .collect();
        if let Some(a) = ap.overall {
            rows.push(CategoryRow {
                category: "overall".into(),
                problems: matrix.problems.len(),
                pass_at_1: if suppress { None } else { p1.overall },
                apr: a,
            });
        }
        Self {
            runs_per_problem: matrix.runs_per_problem,
            agentic: matrix.agentic,
            rows,
            iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(EvalError::UnknownFormat(other.into())),
        }
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

/// Renders the report. Same input, same bytes.
pub fn emit_report(report: &MetricReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        ReportFormat::Markdown => {
            let mut s = String::from("# Benchmark report\n\n");
            let _ = writeln!(s, "Runs per problem: {}\n", report.runs_per_problem);
            s.push_str("| Category | Problems | Pass@1 | APR |\n|---|---:|---:|---:|\n");
            for r in &report.rows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {:.2} |",
                    r.category,
                    r.problems,
                    pct(r.pass_at_1),
                    r.apr
                );
            }
            if let Some(it) = &report.iterations {
                s.push_str("\n## Iterations to success\n\n| Metric | Value |\n|---|---:|\n");
                let _ = writeln!(s, "| Paired runs (both solved) | {} of {} |", it.both_solved, it.pairs);
                let _ = writeln!(s, "| Mean iterations, parallel | {:.2} |", it.mean_parallel);
                let _ = writeln!(s, "| Mean iterations, solo | {:.2} |", it.mean_solo);
                let _ = writeln!(s, "| Speedup | {:.2}x |", it.speedup);
            }
            s
        }
    }
}

/// Outcomes gathered from a runs directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub matrix: RunMatrix,
    pub pairs: Vec<IterationPair>,
    pub warnings: Vec<String>,
}

impl Aggregate {
    pub fn report(&self) -> MetricReport {
        let stats = iteration_accounting(&self.pairs).ok();
        MetricReport::build(&self.matrix, stats)
    }
}

fn find_outcomes(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    let mut entries: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_outcomes(&p, out);
        } else if p.file_name().is_some_and(|n| n == OUTCOME_FILE) {
            out.push(p);
        }
    }
}

/// Builds the run matrix from every `outcome.json` below `root`. Race
/// outcomes become matrix cells, solo baselines are paired with the race of
/// the same task and run index. A task with an unreadable outcome, or with
/// fewer runs than the others, is skipped with a warning. The task is
/// identified by the directory directly below `root`.
pub fn aggregate(root: &Path) -> Result<Aggregate, EvalError> {
    let mut files = Vec::new();
    find_outcomes(root, &mut files);
    if files.is_empty() {
        return Err(EvalError::NoOutcomes(root.to_path_buf()));
    }
    let mut warnings = Vec::new();
    let mut broken: BTreeSet<String> = BTreeSet::new();
    let mut outcomes: BTreeMap<String, Vec<OutcomeFile>> = BTreeMap::new();
    for f in &files {
        let group = f
            .strip_prefix(root)
            .ok()
            .and_then(|r| r.components().next())
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .unwrap_or_default();
        match OutcomeFile::load(f) {
            Ok(o) => outcomes.entry(group).or_default().push(o),
            Err(e) => {
                warnings.push(format!("skipping {group}: {}: {e}", f.display()));
                broken.insert(group);
            }
        }
    }
    for b in &broken {
        outcomes.remove(b);
    }
    if outcomes.is_empty() {
        return Err(EvalError::NoOutcomes(root.to_path_buf()));
    }

    let runs = |os: &[OutcomeFile]| os.iter().filter(|o| o.role == RunRole::Race).count();
    let r = outcomes.values().map(|os| runs(os)).max().unwrap_or(0);
    let mut problems = Vec::new();
    let mut pairs = Vec::new();
    for (group, os) in &outcomes {
        if runs(os) != r {
            warnings.push(format!("skipping {group}: {} of {r} runs", runs(os)));
            continue;
        }
        let mut races: Vec<&OutcomeFile> = os.iter().filter(|o| o.role == RunRole::Race).collect();
        races.sort_by_key(|o| o.run);
        problems.push(ProblemRow {
            id: races[0].task_id.clone(),
            category: races[0].category,
            results: races.iter().map(|o| o.solved).collect(),
        });
        for race in &races {
            if let Some(solo) = os
                .iter()
                .find(|o| o.role == RunRole::SoloBaseline && o.run == race.run)
            {
                pairs.push(IterationPair {
                    parallel: race.iterations_to_success,
                    solo: solo.iterations_to_success,
                });
            }
        }
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    let matrix = RunMatrix {
        problems,
        runs_per_problem: r.max(1),
        agentic: false,
    };
    Ok(Aggregate {
        matrix,
        pairs,
        warnings,
    })
}
