//! Run configuration.
//!
//! A TOML file with the sections `[run]`, `[policy]`, `[roles.plan]`,
//! `[roles.code]`, `[roles.debug]`, `[evaluator]` and `[provider]`. Every
//! field has a default; the resolved form lists all of them and is what a
//! run directory records. Environment variables may supply the provider
//! credential and nothing else.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::provider::{HttpProvider, HttpProviderConfig, Provider, ScriptedProvider};
use crate::agents::simulated::{SimulatedProvider, SimulatedProviderSpec};
use crate::agents::{AgentRole, RoleSet};
use crate::eval::{Evaluator, SimLandscapeSpec, SimulatedEvaluator, SubprocessEvaluator};
use crate::policy::PolicyParams;
use crate::templates::Templates;
use crate::window::Role;

pub const DEFAULT_CREDENTIAL_ENV: &str = "KERNEL_TREE_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    #[default]
    Stark,
    Sampling,
    Reflexion,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Stark => "stark",
            AgentKind::Sampling => "sampling",
            AgentKind::Reflexion => "reflexion",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stark" => Ok(AgentKind::Stark),
            "sampling" => Ok(AgentKind::Sampling),
            "reflexion" => Ok(AgentKind::Reflexion),
            other => Err(format!(
                "unknown agent {other} (expected stark, sampling or reflexion)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub agent: AgentKind,
    pub budget: usize,
    pub leaderboard_r: usize,
    pub window_cap: usize,
    pub seed: u64,
    /// Temperature of the sampling and reflexion agents.
    pub baseline_temperature: f64,
    /// Chain reflexion attempts from the last correct node instead of the
    /// literal last attempt.
    pub reflexion_from_last_success: bool,
    pub task_id: String,
    pub tasks_dir: PathBuf,
    pub out_dir: PathBuf,
    pub templates_dir: Option<PathBuf>,
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            agent: AgentKind::Stark,
            budget: 30,
            leaderboard_r: 2,
            window_cap: 5,
            seed: 0,
            baseline_temperature: 0.7,
            reflexion_from_last_success: false,
            task_id: String::new(),
            tasks_dir: PathBuf::from("tasks"),
            out_dir: PathBuf::from("runs"),
            templates_dir: None,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    #[default]
    Simulated,
    Subprocess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub kind: EvaluatorKind,
    pub command: Vec<String>,
    pub num_warmup: u32,
    pub num_trials: u32,
    pub timeout_s: u64,
    pub device_hint: String,
    pub landscape: SimLandscapeSpec,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        let d = SubprocessEvaluator::new(Vec::new());
        Self {
            kind: EvaluatorKind::Simulated,
            command: Vec::new(),
            num_warmup: d.num_warmup,
            num_trials: d.num_trials,
            timeout_s: d.timeout_s,
            device_hint: d.device_hint,
            landscape: SimLandscapeSpec::default(),
        }
    }
}

impl EvaluatorConfig {
    pub fn build(&self) -> Box<dyn Evaluator> {
        match self.kind {
            EvaluatorKind::Simulated => Box::new(SimulatedEvaluator {
                spec: self.landscape.clone(),
            }),
            EvaluatorKind::Subprocess => Box::new(SubprocessEvaluator {
                command: self.command.clone(),
                num_warmup: self.num_warmup,
                num_trials: self.num_trials,
                timeout_s: self.timeout_s,
                device_hint: self.device_hint.clone(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Simulated,
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: String,
    /// Environment variable holding the bearer credential.
    pub credential_env: String,
    /// Credential given in the file. Never written back out.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    /// Model id for roles that do not set their own.
    pub model_id: String,
    pub timeout_s: u64,
    pub retries: u32,
    pub backoff_base_ms: u64,
    /// Reply script for the scripted provider.
    pub script: Option<PathBuf>,
    pub simulated: SimulatedProviderSpec,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Simulated,
            endpoint: String::new(),
            credential_env: DEFAULT_CREDENTIAL_ENV.to_string(),
            api_key: None,
            model_id: "default".to_string(),
            timeout_s: 120,
            retries: 3,
            backoff_base_ms: 1000,
            script: None,
            simulated: SimulatedProviderSpec::default(),
        }
    }
}

impl ProviderConfig {
    /// Credential from the environment, falling back to the file.
    pub fn credential(&self) -> Option<String> {
        std::env::var(&self.credential_env)
            .ok()
            .filter(|v| !v.is_empty())
            .or_else(|| self.api_key.clone())
    }

    /// Build the provider. The simulated provider draws from `seed`.
    pub fn build(&self, seed: u64) -> Result<Box<dyn Provider>, ConfigError> {
        match self.kind {
            ProviderKind::Simulated => {
                Ok(Box::new(SimulatedProvider::new(SimulatedProviderSpec {
                    seed,
                    ..self.simulated.clone()
                })))
            }
            ProviderKind::Scripted => {
                let path = self.script.as_ref().ok_or_else(|| {
                    ConfigError::Invalid("scripted provider needs provider.script".into())
                })?;
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                Ok(Box::new(
                    ScriptedProvider::from_json(&text).map_err(ConfigError::Invalid)?,
                ))
            }
            ProviderKind::Http => {
                let cfg = HttpProviderConfig {
                    endpoint: self.endpoint.clone(),
                    api_key: self.credential(),
                    timeout: Duration::from_secs(self.timeout_s),
                    max_attempts: self.retries,
                    backoff_base: Duration::from_millis(self.backoff_base_ms),
                };
                Ok(Box::new(
                    HttpProvider::new(cfg).map_err(|e| ConfigError::Invalid(e.to_string()))?,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RoleOverride {
    temperature: Option<f64>,
    model_id: Option<String>,
    max_output_tokens: Option<u32>,
    template_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RolesFile {
    plan: RoleOverride,
    code: RoleOverride,
    debug: RoleOverride,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    run: RunSection,
    policy: Option<PolicyParams>,
    roles: RolesFile,
    evaluator: EvaluatorConfig,
    provider: ProviderConfig,
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub policy: PolicyParams,
    pub roles: RoleSet,
    pub evaluator: EvaluatorConfig,
    pub provider: ProviderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::resolve(ConfigFile::default())
    }
}

impl RunConfig {
    fn resolve(file: ConfigFile) -> Self {
        let role = |r: Role, o: &RoleOverride| {
            let d = AgentRole::default_for(r);
            AgentRole {
                name: r,
                temperature: o.temperature.unwrap_or(d.temperature),
                model_id: o
                    .model_id
                    .clone()
                    .unwrap_or_else(|| file.provider.model_id.clone()),
                max_output_tokens: o.max_output_tokens.unwrap_or(d.max_output_tokens),
                template_id: o.template_id.clone().unwrap_or(d.template_id),
            }
        };
        let roles = RoleSet {
            plan: role(Role::Plan, &file.roles.plan),
            code: role(Role::Code, &file.roles.code),
            debug: role(Role::Debug, &file.roles.debug),
        };
        let policy = file.policy.unwrap_or_else(|| PolicyParams {
            seed: file.run.seed,
            ..PolicyParams::default()
        });
        Self {
            run: file.run,
            policy,
            roles,
            evaluator: file.evaluator,
            provider: file.provider,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let explicit_policy_seed = file.policy.as_ref().map_or(0, |p| p.seed);
        let mut cfg = Self::resolve(file);
        if explicit_policy_seed != 0 && explicit_policy_seed != cfg.run.seed {
            return Err(ConfigError::Invalid(format!(
                "policy.seed {explicit_policy_seed} differs from run.seed {}; set run.seed only",
                cfg.run.seed
            )));
        }
        cfg.policy.seed = cfg.run.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Change the seed of the run stream.
    pub fn set_seed(&mut self, seed: u64) {
        self.run.seed = seed;
        self.policy.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let r = &self.run;
        if r.budget == 0 {
            return bad("run.budget must be positive".into());
        }
        if r.leaderboard_r == 0 {
            return bad("run.leaderboard_r must be positive".into());
        }
        if r.window_cap < 2 {
            return bad(format!(
                "run.window_cap must be at least 2, got {}",
                r.window_cap
            ));
        }
        if r.jobs == 0 {
            return bad("run.jobs must be positive".into());
        }
        if !(r.baseline_temperature.is_finite() && r.baseline_temperature >= 0.0) {
            return bad("run.baseline_temperature must be >= 0".into());
        }
        self.policy.validate().map_err(ConfigError::Invalid)?;
        self.roles.validate().map_err(ConfigError::Invalid)?;
        let e = &self.evaluator;
        if e.num_warmup == 0 || e.num_trials == 0 || e.timeout_s == 0 {
            return bad("evaluator.num_warmup, num_trials and timeout_s must be positive".into());
        }
        match e.kind {
            EvaluatorKind::Subprocess if e.command.is_empty() => {
                return bad("evaluator.command is required for the subprocess evaluator".into())
            }
            EvaluatorKind::Simulated => e.landscape.validate().map_err(ConfigError::Invalid)?,
            _ => {}
        }
        let p = &self.provider;
        if p.retries == 0 || p.timeout_s == 0 {
            return bad("provider.retries and provider.timeout_s must be positive".into());
        }
        match p.kind {
            ProviderKind::Http
                if !(p.endpoint.starts_with("http://") || p.endpoint.starts_with("https://")) =>
            {
                return bad(format!(
                    "provider.endpoint must be an http(s) URL, got {:?}",
                    p.endpoint
                ))
            }
            ProviderKind::Scripted if p.script.is_none() => {
                return bad("provider.script is required for the scripted provider".into())
            }
            ProviderKind::Simulated if !(0.0..=1.0).contains(&p.simulated.p_directive) => {
                return bad("provider.simulated.p_directive must lie in [0, 1]".into())
            }
            _ => {}
        }
        Ok(())
    }

    pub fn templates(&self) -> Result<Templates, ConfigError> {
        match &self.run.templates_dir {
            Some(dir) => Templates::load_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(Templates::builtin()),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
