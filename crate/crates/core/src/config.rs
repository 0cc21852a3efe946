//! Run configuration, read from TOML. Command-line flags override it.
//!
//! ```toml
//! [paths]
//! kg = "data/kg.tsv"
//! questions = "data/questions.jsonl"
//! output = "out"
//!
//! [params]
//! seed = 7
//! max_steps = 10
//!
//! [policy]
//! backend = "http"
//!
//! [policy.http]
//! endpoint = "http://127.0.0.1:8000/v1/chat/completions"
//! model = "my-model"
//! auth_env = "POLICY_TOKEN"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvConfig;
use crate::policy::HttpPolicyConfig;
use crate::rules::PlannerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{what} not found: {path}")]
    MissingPath { what: String, path: String },
    #[error("no {0} given")]
    Unset(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub kg: Option<PathBuf>,
    /// Questions the subcommand works on.
    pub questions: Option<PathBuf>,
    /// Seed questions for planner demonstrations.
    pub train_questions: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    /// Demonstrations cache written by `mine-rules`.
    pub demonstrations: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub seed: u64,
    pub max_len: usize,
    pub k: usize,
    pub m: usize,
    pub max_steps: usize,
    pub removal_ratio: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub concurrency: usize,
    pub top_n_docs: usize,
    pub max_list_items: usize,
    pub max_chars: usize,
    pub plan_on_reset: bool,
    pub baseline_validation: bool,
}

impl Default for Params {
    fn default() -> Self {
        let env = EnvConfig::default();
        let planner = PlannerConfig::default();
        Self {
            seed: 0,
            max_len: planner.max_len,
            k: planner.k,
            m: planner.m,
            max_steps: env.max_steps,
            removal_ratio: 0.5,
            epsilon: 0.5,
            iterations: 2,
            concurrency: 1,
            top_n_docs: env.top_n_docs,
            max_list_items: env.max_list_items,
            max_chars: env.max_chars,
            plan_on_reset: env.plan_on_reset,
            baseline_validation: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Http,
    Scripted,
    Replay,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySettings {
    pub backend: Backend,
    /// Script JSONL for the scripted backend.
    pub script: Option<PathBuf>,
    /// Trajectory JSONL for the replay backend.
    pub replay: Option<PathBuf>,
    pub http: HttpPolicyConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub params: Params,
    pub policy: PolicySettings,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.kg,
            &mut p.questions,
            &mut p.train_questions,
            &mut p.validation,
            &mut p.corpus,
            &mut p.templates,
            &mut p.demonstrations,
            &mut p.output,
            &mut self.policy.script,
            &mut self.policy.replay,
        ] {
            if let Some(path) = slot.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }

    /// Numeric bounds; checked before anything is read or written.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.params;
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(p.removal_ratio > 0.0 && p.removal_ratio <= 1.0) {
            return bad(format!("removal_ratio must be in (0, 1], got {}", p.removal_ratio));
        }
        if p.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        if p.m == 0 {
            return bad("m must be at least 1".into());
        }
        if p.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if p.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if p.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        if !(p.epsilon >= 0.0 && p.epsilon.is_finite()) {
            return bad(format!("epsilon must be a non-negative number, got {}", p.epsilon));
        }
        if p.max_list_items == 0 || p.max_chars < 32 {
            return bad("max_list_items must be at least 1 and max_chars at least 32".into());
        }
        let h = &self.policy.http;
        if !(0.0..=2.0).contains(&h.temperature) || !(h.top_p > 0.0 && h.top_p <= 1.0) {
            return bad("temperature must be in [0, 2] and top_p in (0, 1]".into());
        }
        if h.max_attempts == 0 || h.max_tokens == 0 {
            return bad("max_attempts and max_tokens must be at least 1".into());
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            max_steps: self.params.max_steps,
            top_n_docs: self.params.top_n_docs,
            max_list_items: self.params.max_list_items,
            max_chars: self.params.max_chars,
            planner_k: self.params.k,
            plan_on_reset: self.params.plan_on_reset,
            ..EnvConfig::default()
        }
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            k: self.params.k,
            m: self.params.m,
            max_len: self.params.max_len,
        }
    }
}

/// The path, which must exist.
pub fn require_existing(what: &str, path: Option<&Path>) -> Result<PathBuf, ConfigError> {
    let path = path.ok_or_else(|| ConfigError::Unset(what.to_string()))?;
    if !path.exists() {
        return Err(ConfigError::MissingPath {
            what: what.to_string(),
            path: path.display().to_string(),
        });
    }
    Ok(path.to_path_buf())
}

/// The path, which need not exist yet.
pub fn require_set(what: &str, path: Option<&Path>) -> Result<PathBuf, ConfigError> {
    path.map(Path::to_path_buf).ok_or_else(|| ConfigError::Unset(what.to_string()))
}
