//! Run configuration.
//!
//! A run is described by a TOML file with one table per component. Every
//! table is optional and falls back to its defaults; unknown keys are
//! rejected. Any key can be overridden from the environment with
//! `T2PO_<SECTION>_<KEY>=<value>`, e.g. `T2PO_TTI_EPSILON=1e-3`. Nested
//! tables use a double underscore: `T2PO_ENV_SHOP__CATALOG_SIZE=40`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demo::WarmStartConfig;
use crate::env::EnvConfig;
use crate::optimizer::CreditConfig;
use crate::par::ExecMode;
use crate::policy::SamplerConfig;
use crate::rollout::{DecodeConfig, OrchestratorConfig};
use crate::signal::SignalConfig;
use crate::tds::TdsConfig;
use crate::tti::TtiConfig;
use crate::vocab::VOCAB_SIZE;

pub const ENV_PREFIX: &str = "T2PO_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("[{section}]: {message}")]
    Section { section: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("environment override {var}: {message}")]
    Override { var: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub iterations: usize,
    pub out_dir: PathBuf,
    pub run_id: String,
    pub exec: ExecMode,
    /// Policy-gradient learning rate.
    pub lr: f64,
    /// Fine-tune on filtered self-generated trajectories before RL.
    pub rft_first: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 200,
            out_dir: PathBuf::from("runs/default"),
            run_id: "run".into(),
            exec: ExecMode::Parallel,
            lr: 0.05,
            rft_first: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub max_response: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self { max_response: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub state_dim: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { state_dim: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RftSection {
    /// Task score a trajectory must exceed to be kept.
    pub threshold: f64,
    /// Extra thresholds whose dataset sizes are reported.
    pub sweep: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Tasks rolled out with the base policy to build the dataset.
    pub tasks: usize,
    /// Held-out trajectories used to measure format validity.
    pub eval_episodes: usize,
}

impl Default for RftSection {
    fn default() -> Self {
        Self {
            threshold: 0.99,
            sweep: vec![0.0, 0.5, 0.99],
            epochs: 3,
            lr: 0.2,
            batch: 64,
            tasks: 16,
            eval_episodes: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub signal: SignalConfig,
    pub tti: TtiConfig,
    pub tds: TdsConfig,
    pub sampler: SamplerConfig,
    pub decode: DecodeSection,
    pub env: EnvConfig,
    pub policy: PolicySection,
    pub warm_start: WarmStartConfig,
    pub optimizer: CreditConfig,
    pub orchestrator: OrchestratorConfig,
    pub rft: RftSection,
}

const SECTIONS: [&str; 12] = [
    "run",
    "signal",
    "tti",
    "tds",
    "sampler",
    "decode",
    "env",
    "policy",
    "warm_start",
    "optimizer",
    "orchestrator",
    "rft",
];

fn check_known_keys(user: &toml::Table, defaults: &toml::Table, path: &str) -> Result<(), ConfigError> {
    for (key, value) in user {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match (defaults.get(key), value) {
            (None, _) => return Err(ConfigError::UnknownKey(full)),
            (Some(toml::Value::Table(d)), toml::Value::Table(u)) => check_known_keys(u, d, &full)?,
            _ => {}
        }
    }
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `T2PO_*` variables from `vars` onto `table`.
pub fn apply_env_overrides(
    table: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<(), ConfigError> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (var, raw) in vars {
        let rest = var[ENV_PREFIX.len()..].to_ascii_lowercase();
        let Some(section) = SECTIONS
            .iter()
            .filter(|s| rest.starts_with(&format!("{s}_")))
            .max_by_key(|s| s.len())
        else {
            return Err(ConfigError::Override {
                var,
                message: format!("no section matches; expected one of {}", SECTIONS.join(", ")),
            });
        };
        let key_path: Vec<&str> = rest[section.len() + 1..].split("__").collect();
        let mut node = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        for part in &key_path[..key_path.len() - 1] {
            let toml::Value::Table(t) = node else {
                return Err(ConfigError::Override {
                    var,
                    message: format!("`{part}` is not a table"),
                });
            };
            node = t
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let toml::Value::Table(t) = node else {
            return Err(ConfigError::Override {
                var,
                message: "parent is not a table".into(),
            });
        };
        t.insert(key_path[key_path.len() - 1].to_string(), parse_override_value(&raw));
    }
    Ok(())
}

fn section<T: serde::de::DeserializeOwned + Default>(table: &mut toml::Table, name: &str) -> Result<T, ConfigError> {
    match table.remove(name) {
        None => Ok(T::default()),
        Some(v) => v.try_into().map_err(|e: toml::de::Error| ConfigError::Section {
            section: name.to_string(),
            message: e.to_string().trim().to_string(),
        }),
    }
}

impl RunConfig {
    /// Build from TOML text plus environment overrides, then validate.
    pub fn from_toml_with_env(
        text: &str,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        apply_env_overrides(&mut table, vars)?;
        let defaults = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        check_known_keys(&table, &defaults, "")?;
        let cfg = RunConfig {
            run: section(&mut table, "run")?,
            signal: section(&mut table, "signal")?,
            tti: section(&mut table, "tti")?,
            tds: section(&mut table, "tds")?,
            sampler: section(&mut table, "sampler")?,
            decode: section(&mut table, "decode")?,
            env: section(&mut table, "env")?,
            policy: section(&mut table, "policy")?,
            warm_start: section(&mut table, "warm_start")?,
            optimizer: section(&mut table, "optimizer")?,
            orchestrator: section(&mut table, "orchestrator")?,
            rft: section(&mut table, "rft")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    /// Read `path` and apply overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.run;
        if r.iterations == 0 {
            return Err(invalid("run.iterations", "must be >= 1"));
        }
        if !(r.lr >= 0.0 && r.lr.is_finite()) {
            return Err(invalid("run.lr", format!("{} must be a finite value >= 0", r.lr)));
        }
        if r.run_id.is_empty() {
            return Err(invalid("run.run_id", "must not be empty"));
        }
        self.signal.validate(VOCAB_SIZE).map_err(|e| invalid("signal", e.to_string()))?;
        self.tti.validate().map_err(|e| invalid("tti", e.to_string()))?;
        self.tds.validate().map_err(|e| invalid("tds", e.to_string()))?;
        self.sampler.validate().map_err(|e| invalid("sampler", e))?;
        if self.decode.max_response == 0 {
            return Err(invalid("decode.max_response", "must be >= 1"));
        }
        if self.tti.l_max > self.decode.max_response {
            return Err(invalid(
                "tti.l_max",
                format!("{} exceeds decode.max_response = {}", self.tti.l_max, self.decode.max_response),
            ));
        }
        self.env.validate().map_err(|e| invalid("env", e))?;
        if self.policy.state_dim == 0 {
            return Err(invalid("policy.state_dim", "must be >= 1"));
        }
        self.warm_start.demo.validate().map_err(|e| invalid("warm_start.demo", e))?;
        if !(self.warm_start.lr >= 0.0) || self.warm_start.batch == 0 {
            return Err(invalid("warm_start", "lr must be >= 0 and batch >= 1"));
        }
        self.optimizer.validate().map_err(|e| invalid("optimizer", e.to_string()))?;
        self.orchestrator.validate().map_err(|e| invalid("orchestrator", e.to_string()))?;
        if self.optimizer.group_size != self.orchestrator.group_size {
            return Err(invalid(
                "optimizer.group_size",
                format!(
                    "{} differs from orchestrator.group_size = {}",
                    self.optimizer.group_size, self.orchestrator.group_size
                ),
            ));
        }
        let rft = &self.rft;
        if rft.batch == 0 || rft.tasks == 0 || rft.eval_episodes == 0 {
            return Err(invalid("rft", "batch, tasks and eval_episodes must be >= 1"));
        }
        if !(rft.lr >= 0.0 && rft.lr.is_finite()) {
            return Err(invalid("rft.lr", format!("{} must be a finite value >= 0", rft.lr)));
        }
        Ok(())
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            signal: self.signal,
            tti: self.tti.clone(),
            tds: self.tds,
            sampler: self.sampler,
            max_response: self.decode.max_response,
        }
    }
}
