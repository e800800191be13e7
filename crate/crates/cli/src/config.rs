//! The JSON config file.
//!
//! ```json
//! {
//!   "backend": {"kind": "scripted", "script": "scripts/two_stage.json"},
//!   "sim": {"sim_timeout": 10},
//!   "loop": {"max_iterations": 30, "coordinator": {"stagnation_threshold": 4}},
//!   "parallel": {"processes": 5, "schedule": "lockstep"},
//!   "forge": {"similarity_threshold": 0.8},
//!   "output_root": "runs",
//!   "seed": 0
//! }
//! ```
//!
//! `backend` sets all three roles at once; `backends` sets them one by one.
//! `${NAME}` anywhere in the file is replaced by that environment variable.
//! Relative paths inside backend specs are resolved against the file.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use hdlagent::forge::ForgeConfig;
use hdlagent::llm::{BackendSpec, ReplayFallback, RoleSpecs};
use hdlagent::orchestrator::{LoopConfig, ParallelConfig, Schedule};
use hdlagent::sim::SimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("environment variable {0} is not set")]
    MissingEnv(String),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParallelSection {
    pub processes: usize,
    pub cancellation_grace: f64,
    pub schedule: Schedule,
}

impl Default for ParallelSection {
    fn default() -> Self {
        let p = ParallelConfig::default();
        Self {
            processes: p.processes,
            cancellation_grace: p.cancellation_grace,
            schedule: p.schedule,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    backend: Option<BackendSpec>,
    #[serde(default)]
    backends: Option<RoleSpecs>,
    #[serde(default)]
    sim: serde_json::Value,
    #[serde(default, rename = "loop")]
    loop_config: LoopConfig,
    #[serde(default)]
    parallel: ParallelSection,
    #[serde(default)]
    forge: ForgeConfig,
    #[serde(default)]
    output_root: Option<PathBuf>,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalConfig {
    /// `None` until a config file or `--replay` supplies backends.
    pub roles: Option<RoleSpecs>,
    pub sim: SimConfig,
    pub loop_config: LoopConfig,
    pub parallel: ParallelSection,
    pub forge: ForgeConfig,
    pub output_root: PathBuf,
    pub seed: u64,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            roles: None,
            sim: SimConfig::detect(),
            loop_config: LoopConfig::default(),
            parallel: ParallelSection::default(),
            forge: ForgeConfig::default(),
            output_root: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

/// Replaces every `${NAME}` with the value of that environment variable.
pub fn interpolate(text: &str) -> Result<String, ConfigError> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap());
    let mut missing = None;
    let out = re.replace_all(text, |c: &regex::Captures| {
        std::env::var(&c[1]).unwrap_or_else(|_| {
            missing.get_or_insert_with(|| c[1].to_string());
            String::new()
        })
    });
    match missing {
        Some(name) => Err(ConfigError::MissingEnv(name)),
        None => Ok(out.into_owned()),
    }
}

fn rebase(spec: &mut BackendSpec, base: &Path) {
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    match spec {
        BackendSpec::Http(_) => {}
        BackendSpec::Scripted { script } => fix(script),
        BackendSpec::Replay { cassette, fallback } => {
            fix(cassette);
            if let ReplayFallback::Record { delegate } = fallback {
                rebase(delegate, base);
            }
        }
    }
}

/// Overlays `patch` onto `base`, object by object.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

impl GlobalConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let parse_err = |message: String| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let raw: RawConfig =
            serde_json::from_str(&interpolate(&text)?).map_err(|e| parse_err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));

        let mut roles = match (raw.backend, raw.backends) {
            (Some(_), Some(_)) => {
                return Err(parse_err("set either `backend` or `backends`, not both".into()))
            }
            (Some(b), None) => Some(RoleSpecs::shared(b)),
            (None, r) => r,
        };
        if let Some(r) = &mut roles {
            rebase(&mut r.generator, base);
            rebase(&mut r.reflector, base);
            rebase(&mut r.coordinator, base);
        }

        let mut sim = serde_json::to_value(SimConfig::detect()).expect("sim config serializes");
        if !raw.sim.is_null() {
            merge(&mut sim, raw.sim);
        }
        let sim: SimConfig = serde_json::from_value(sim).map_err(|e| parse_err(format!("sim: {e}")))?;

        Ok(Self {
            roles,
            sim,
            loop_config: raw.loop_config,
            parallel: raw.parallel,
            forge: raw.forge,
            output_root: raw.output_root.unwrap_or_else(|| PathBuf::from("runs")),
            seed: raw.seed,
        })
    }

    /// Swaps every role to replay from `cassette`.
    pub fn replay(&mut self, cassette: &Path) {
        self.roles = Some(RoleSpecs::shared(BackendSpec::Replay {
            cassette: cassette.to_path_buf(),
            fallback: ReplayFallback::Error,
        }));
    }

    pub fn parallel_config(&self) -> ParallelConfig {
        ParallelConfig {
            processes: self.parallel.processes,
            loop_config: self.loop_config.clone(),
            cancellation_grace: self.parallel.cancellation_grace,
            schedule: self.parallel.schedule,
        }
    }

    /// Checks everything a loop run needs: backends present and their files
    /// readable, sane numbers. The simulator is checked separately since
    /// not every command needs it.
    pub fn validate_for_run(&self) -> Result<&RoleSpecs, ConfigError> {
        let roles = self
            .roles
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("no backends configured (use --config or --replay)".into()))?;
        for spec in [&roles.generator, &roles.reflector, &roles.coordinator] {
            for f in spec.referenced_files() {
                if !f.is_file() {
                    return Err(ConfigError::Invalid(format!("backend file {} not found", f.display())));
                }
            }
        }
        if self.parallel.processes == 0 {
            return Err(ConfigError::Invalid("parallel processes must be at least 1".into()));
        }
        if self.loop_config.max_iterations == 0 {
            return Err(ConfigError::Invalid("max_iterations must be at least 1".into()));
        }
        self.loop_config
            .coordinator
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sim.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(roles)
    }
}
