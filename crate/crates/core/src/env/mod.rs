//! Multi-turn environments and output-format handling.

pub mod chain;
pub mod format;
pub mod shop;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::TokenId;

use chain::ChainEnv;
use shop::{EpisodeTask, ShopEnv, ShopGenConfig, ShopRewardConfig};

pub use format::{
    apply_format_penalty, validate_relaxed, validate_strict, ParsedAction, FALLBACK_COMMAND,
};

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("episode already finished")]
    EpisodeFinished,
}

/// What the agent sees at the start of a turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    /// Canonical encoding of the environment state; equal keys mean equal states.
    pub state_key: String,
    pub admissible_actions: Vec<String>,
    /// Product ids behind the `item0..item9` slot tokens on this view.
    pub slot_targets: Vec<String>,
    /// Structured facts consumed by the policy featurizer.
    pub facts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub invalid_action: bool,
    /// Task score on the terminal step.
    pub task_score: Option<f64>,
}

pub trait Environment: Clone + Send + Sync {
    fn reset(&mut self) -> Observation;
    fn step(&mut self, command: &str) -> Result<StepOutcome, EnvError>;
    fn prompt(&self) -> &str;
    fn task_id(&self) -> &str;
    fn max_turns(&self) -> usize;
    /// Task-relevant vocabulary tokens (used when scripting demonstrations).
    fn keywords(&self) -> Vec<TokenId>;
    /// Command tokens (verb + arguments) a competent agent would emit now.
    fn expert_command(&self, rng: &mut ChaCha8Rng) -> Vec<TokenId>;
}

/// Which environment family a run uses and how tasks are generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Shop,
    Chain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub chain_length: usize,
    pub shop: ShopGenConfig,
    pub reward: ShopRewardConfig,
    /// Deducted from a turn's reward when its output fails the strict format.
    pub format_penalty: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::Shop,
            chain_length: 3,
            shop: ShopGenConfig::default(),
            reward: ShopRewardConfig::default(),
            format_penalty: 0.1,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.chain_length == 0 {
            return Err("chain_length must be >= 1".into());
        }
        let s = &self.shop;
        if s.catalog_size == 0 || s.min_attributes == 0 || s.min_attributes > s.max_attributes {
            return Err("shop catalog_size and attribute bounds must be positive and ordered".into());
        }
        if !(s.min_price > 0.0 && s.min_price < s.max_price) {
            return Err(format!("shop price range [{}, {}] invalid", s.min_price, s.max_price));
        }
        if !(self.format_penalty >= 0.0) {
            return Err(format!("format_penalty = {} must be >= 0", self.format_penalty));
        }
        Ok(())
    }

    pub fn make_task(&self, task_id: impl Into<String>, seed: u64, max_turns: usize) -> AnyEnv {
        match self.kind {
            EnvKind::Shop => AnyEnv::Shop(ShopEnv::new(
                EpisodeTask::generate(task_id, seed, max_turns, &self.shop),
                self.reward,
            )),
            EnvKind::Chain => AnyEnv::Chain(ChainEnv::generate(task_id, seed, self.chain_length, max_turns)),
        }
    }
}

#[derive(Debug, Clone)]
pub enum AnyEnv {
    Shop(ShopEnv),
    Chain(ChainEnv),
}

macro_rules! delegate {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            AnyEnv::Shop($e) => $body,
            AnyEnv::Chain($e) => $body,
        }
    };
}

impl Environment for AnyEnv {
    fn reset(&mut self) -> Observation {
        delegate!(self, e => e.reset())
    }

    fn step(&mut self, command: &str) -> Result<StepOutcome, EnvError> {
        delegate!(self, e => e.step(command))
    }

    fn prompt(&self) -> &str {
        delegate!(self, e => e.prompt())
    }

    fn task_id(&self) -> &str {
        delegate!(self, e => e.task_id())
    }

    fn max_turns(&self) -> usize {
        delegate!(self, e => e.max_turns())
    }

    fn keywords(&self) -> Vec<TokenId> {
        delegate!(self, e => e.keywords())
    }

    fn expert_command(&self, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        delegate!(self, e => e.expert_command(rng))
    }
}
