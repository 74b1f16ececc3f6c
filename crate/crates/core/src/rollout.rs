//! Multi-turn trajectory collection with both controllers in the loop.
//!
//! A turn is decoded token by token. While the agent is thinking every
//! sampled token feeds the uncertainty trace and the token-level controller,
//! which may force the thinking segment closed. The finished candidate is
//! judged by the turn-level controller; rejected candidates are kept for
//! logging but never reach the environment.

use std::collections::VecDeque;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::env::{apply_format_penalty, validate_relaxed, AnyEnv, EnvError, Environment, Observation, ParsedAction};
use crate::par::{self, ExecMode};
use crate::policy::{sample, sequence_log_prob_masked, state_facts, PolicyParams, RftExample, SamplerConfig, StateFeatures};
use crate::signal::{SignalConfig, SignalError, TokenDistribution, UncertaintySample, UncertaintyTrace};
use crate::tds::{TdsConfig, TdsController, TdsDecision, TdsError};
use crate::tti::{ControlDecision, Trigger, TriggerCause, TtiConfig, TtiController, TtiError};
use crate::vocab::{TokenId, Vocabulary, ACTION_OPEN, END, THINK_CLOSE};

pub const LOG_SCHEMA_VERSION: u32 = 1;

/// Trajectories remembered by [`KHatTracker`].
pub const K_HAT_WINDOW: usize = 100;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("task {task_id}, turn {turn}: {source}")]
    Env {
        task_id: String,
        turn: usize,
        source: EnvError,
    },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Tti(#[from] TtiError),
    #[error(transparent)]
    Tds(#[from] TdsError),
    #[error("invalid orchestrator config: {0}")]
    Config(String),
    #[error("writing trajectory log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrchestratorConfig {
    /// Number of most recent turns rendered into the state.
    pub memory_window: usize,
    pub group_size: usize,
    pub max_turns: usize,
    /// Upper bound on turn samples used by one iteration's update.
    pub target_samples: usize,
    /// Tasks (rollout groups) collected per iteration.
    pub rollout_batch: usize,
    /// Turn samples per gradient step.
    pub update_batch: usize,
    /// Responses per prompt used in the staleness estimate.
    pub prompt_group: usize,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            memory_window: 2,
            group_size: 8,
            max_turns: 15,
            target_samples: 4096,
            rollout_batch: 4,
            update_batch: 64,
            prompt_group: 8,
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        let fields = [
            ("memory_window", self.memory_window),
            ("group_size", self.group_size),
            ("max_turns", self.max_turns),
            ("target_samples", self.target_samples),
            ("rollout_batch", self.rollout_batch),
            ("update_batch", self.update_batch),
            ("prompt_group", self.prompt_group),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(RolloutError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Everything that shapes how a single turn is decoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub signal: SignalConfig,
    pub tti: TtiConfig,
    pub tds: TdsConfig,
    pub sampler: SamplerConfig,
    /// Hard cap on tokens per turn.
    pub max_response: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            signal: SignalConfig::default(),
            tti: TtiConfig::default(),
            tds: TdsConfig::default(),
            sampler: SamplerConfig::default(),
            max_response: 500,
        }
    }
}

/// One generated response, accepted or not.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub tokens: Vec<TokenId>,
    pub forced: Vec<bool>,
    /// Signals of the sampled (non-forced) tokens, thinking and action alike.
    pub signals: Vec<UncertaintySample>,
    pub trigger: Option<Trigger>,
    /// Hit the response cap before emitting END.
    pub truncated: bool,
    pub text: String,
    pub action: ParsedAction,
    pub old_log_prob: f64,
    pub phi: f64,
    pub gamma: f64,
    pub attempt: usize,
}

impl Candidate {
    pub fn include_mask(&self) -> Vec<bool> {
        self.forced.iter().map(|f| !f).collect()
    }

    pub fn budget_hit(&self) -> bool {
        self.trigger.is_some_and(|t| t.cause == TriggerCause::Budget)
    }

    pub fn window_trigger(&self) -> bool {
        self.trigger.is_some_and(|t| t.cause == TriggerCause::Window)
    }
}

/// An accepted turn together with its environment outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub turn_index: usize,
    pub state_key: String,
    pub history: String,
    pub features: StateFeatures,
    pub candidate: Candidate,
    /// Candidates rejected before this one was accepted.
    pub rejected: Vec<Candidate>,
    pub env_reward: f64,
    /// Environment reward after the format penalty.
    pub reward: f64,
    pub invalid_action: bool,
    pub done: bool,
    pub task_score: Option<f64>,
}

impl Turn {
    pub fn rejected_tokens(&self) -> usize {
        self.rejected.iter().map(|c| c.tokens.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task_id: String,
    pub group_index: usize,
    pub traj_index: usize,
    pub turns: Vec<Turn>,
    pub total_reward: f64,
    pub task_score: f64,
}

impl Trajectory {
    pub fn success(&self) -> bool {
        self.task_score >= 1.0 - 1e-9
    }

    /// Tokens generated, rejected candidates included.
    pub fn tokens_generated(&self) -> usize {
        self.turns.iter().map(|t| t.candidate.tokens.len() + t.rejected_tokens()).sum()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.turns.iter().map(|t| t.reward).collect()
    }

    pub fn rejected_candidates(&self) -> impl Iterator<Item = &Candidate> {
        self.turns.iter().flat_map(|t| t.rejected.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task_id: String,
    pub group_index: usize,
    pub trajectories: Vec<Trajectory>,
}

/// Render the prompt, the last `p` (observation, action) pairs of `history`
/// and the current observation.
pub fn build_memory_context(
    prompt: &str,
    history: &[(Observation, ParsedAction)],
    current: &Observation,
    p: usize,
) -> String {
    let start = history.len().saturating_sub(p);
    let mut out = format!("User Prompt:\n{prompt}\n\n");
    if start < history.len() {
        out.push_str(&format!(
            "Memory Context (most recent {} of {} turns):\n",
            history.len() - start,
            history.len()
        ));
        for (i, (obs, action)) in history.iter().enumerate().skip(start) {
            out.push_str(&format!("[Turn {}] Observation: {}\n", i + 1, obs.text));
            out.push_str(&format!("[Turn {}] Action: {}\n", i + 1, action.executable()));
        }
        out.push('\n');
    }
    out.push_str(&format!("Current Observation:\n{}\n\n", current.text));
    out.push_str("Instruction:\nThink inside <think> </think>, then give exactly one command inside <action> </action>.");
    if !current.admissible_actions.is_empty() {
        out.push_str(&format!(" Admissible actions: {}.", current.admissible_actions.join(", ")));
    }
    out
}

/// Decode one response from `features`. Returns the candidate and the
/// uncertainty trace of its thinking segment.
pub fn generate_candidate(
    policy: &PolicyParams,
    features: &StateFeatures,
    obs: &Observation,
    decode: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Candidate, UncertaintyTrace), RolloutError> {
    let base = policy.state_logits(features);
    let mut tokens = Vec::new();
    let mut forced = Vec::new();
    let mut trace = UncertaintyTrace::new();
    let mut tti = TtiController::new(decode.tti.clone())?;
    let mut thinking = true;
    let mut next_forced = None;
    let mut truncated = false;

    loop {
        if tokens.len() >= decode.max_response {
            truncated = true;
            break;
        }
        let logits = policy.logits_cached(&base, &tokens);
        let is_forced = next_forced.is_some();
        if !is_forced {
            trace.observe(&TokenDistribution::from_logits(&logits), &decode.signal)?;
        }
        let tok = sample(&logits, &decode.sampler, next_forced.take(), rng);
        tokens.push(tok);
        forced.push(is_forced);
        if tok == END {
            break;
        }
        if thinking {
            if !is_forced && (tok == THINK_CLOSE || tok == ACTION_OPEN) {
                thinking = false;
            } else {
                match tti.observe_token(&trace)? {
                    ControlDecision::ForceToken(f) => next_forced = Some(f),
                    ControlDecision::Continue if tti.state().is_finished() => thinking = false,
                    ControlDecision::Continue | ControlDecision::Terminate => {}
                }
            }
        }
    }

    let text = Vocabulary::get().render(&tokens, &obs.slot_targets);
    let mut action = validate_relaxed(&text);
    action.raw = tokens.clone();
    let include: Vec<bool> = forced.iter().map(|f| !f).collect();
    let old_log_prob = sequence_log_prob_masked(policy, features, &tokens, &include);
    let candidate = Candidate {
        tokens,
        forced,
        signals: trace.samples().to_vec(),
        trigger: tti.state().trigger,
        truncated,
        text,
        action,
        old_log_prob,
        phi: f64::NAN,
        gamma: f64::NAN,
        attempt: 1,
    };
    Ok((candidate, trace))
}

/// Collects trajectories under fixed decoding and orchestration settings.
#[derive(Debug, Clone)]
pub struct Collector {
    pub decode: DecodeConfig,
    pub orch: OrchestratorConfig,
    /// Deducted from a turn's reward when its output fails the strict format.
    pub format_penalty: f64,
    pub mode: ExecMode,
}

impl Collector {
    pub fn new(decode: DecodeConfig, orch: OrchestratorConfig, format_penalty: f64, mode: ExecMode) -> Self {
        Self {
            decode,
            orch,
            format_penalty,
            mode,
        }
    }

    /// Roll out one episode on a fresh copy of `env`.
    pub fn collect_trajectory(
        &self,
        env: &AnyEnv,
        policy: &PolicyParams,
        group_index: usize,
        traj_index: usize,
        seed: u64,
    ) -> Result<Trajectory, RolloutError> {
        let mut env = env.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut obs = env.reset();
        let mut memory: Vec<(Observation, ParsedAction)> = Vec::new();
        let mut tds = TdsController::new(self.decode.tds, self.decode.signal.m_floor)?;
        let mut turns: Vec<Turn> = Vec::new();
        let mut task_score = 0.0;
        let p = self.orch.memory_window;

        for k in 0..self.orch.max_turns.min(env.max_turns()) {
            let window = &memory[memory.len().saturating_sub(p)..];
            let history = build_memory_context(env.prompt(), &memory, &obs, p);
            let features = StateFeatures::from_facts(&state_facts(&obs, window), policy.state_dim());

            let mut rejected = Vec::new();
            let accepted = loop {
                let (mut cand, trace) = generate_candidate(policy, &features, &obs, &self.decode, &mut rng)?;
                let verdict = tds.judge(&trace)?;
                cand.phi = verdict.phi;
                cand.gamma = verdict.gamma;
                cand.attempt = verdict.attempt;
                if verdict.decision == TdsDecision::Accept {
                    break cand;
                }
                rejected.push(cand);
            };

            let outcome = env.step(accepted.action.executable()).map_err(|source| RolloutError::Env {
                task_id: env.task_id().to_string(),
                turn: k,
                source,
            })?;
            let reward = apply_format_penalty(outcome.reward, accepted.action.strict_valid, self.format_penalty);
            if let Some(s) = outcome.task_score {
                task_score = s;
            }
            let state_key = obs.state_key.clone();
            memory.push((obs, accepted.action.clone()));
            turns.push(Turn {
                turn_index: k,
                state_key,
                history,
                features,
                candidate: accepted,
                rejected,
                env_reward: outcome.reward,
                reward,
                invalid_action: outcome.invalid_action,
                done: outcome.done,
                task_score: outcome.task_score,
            });
            obs = outcome.observation;
            if outcome.done {
                break;
            }
        }

        Ok(Trajectory {
            task_id: env.task_id().to_string(),
            group_index,
            traj_index,
            total_reward: turns.iter().map(|t| t.reward).sum(),
            turns,
            task_score,
        })
    }

    /// `G` trajectories on the same task. Trajectory `i` uses the seed
    /// `derive_seed(seed, [group_index, i])`.
    pub fn collect_group(
        &self,
        env: &AnyEnv,
        policy: &PolicyParams,
        group_index: usize,
        seed: u64,
    ) -> Result<RolloutGroup, RolloutError> {
        let mut groups = self.collect_batch(std::slice::from_ref(env), policy, seed, group_index)?;
        Ok(groups.pop().expect("one group requested"))
    }

    /// One rollout group per task, every trajectory collected in parallel.
    /// Group `j` gets index `first_group + j`.
    pub fn collect_batch(
        &self,
        tasks: &[AnyEnv],
        policy: &PolicyParams,
        seed: u64,
        first_group: usize,
    ) -> Result<Vec<RolloutGroup>, RolloutError> {
        let g = self.orch.group_size;
        let jobs: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|j| (0..g).map(move |i| (j, i))).collect();
        let results = par::map(self.mode, &jobs, |&(j, i)| {
            let group_index = first_group + j;
            let s = derive_seed(seed, &[group_index as u64, i as u64]);
            self.collect_trajectory(&tasks[j], policy, group_index, i, s)
        });
        let mut groups: Vec<RolloutGroup> = tasks
            .iter()
            .enumerate()
            .map(|(j, t)| RolloutGroup {
                task_id: t.task_id().to_string(),
                group_index: first_group + j,
                trajectories: Vec::with_capacity(g),
            })
            .collect();
        for ((j, _), r) in jobs.into_iter().zip(results) {
            groups[j].trajectories.push(r?);
        }
        Ok(groups)
    }
}

/// One optimization sample per accepted turn.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnSample {
    pub history: String,
    pub features: StateFeatures,
    pub tokens: Vec<TokenId>,
    pub include: Vec<bool>,
    pub old_log_prob: f64,
    pub reward: f64,
    pub state_key: String,
    pub command: String,
    pub void: bool,
}

pub fn decompose(traj: &Trajectory) -> Vec<TurnSample> {
    traj.turns
        .iter()
        .map(|t| TurnSample {
            history: t.history.clone(),
            features: t.features.clone(),
            tokens: t.candidate.tokens.clone(),
            include: t.candidate.include_mask(),
            old_log_prob: t.candidate.old_log_prob,
            reward: t.reward,
            state_key: t.state_key.clone(),
            command: t.candidate.action.executable().to_string(),
            void: t.candidate.action.is_void(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StalenessReport {
    pub k_hat: f64,
    pub delta: f64,
    pub rho_stale: f64,
}

/// Expected policy lag `delta = B_rollout * n * k_hat / B_update` and the
/// stale fraction `delta / (1 + delta)`.
pub fn staleness(rollout_batch: usize, prompt_group: usize, k_hat: f64, update_batch: usize) -> StalenessReport {
    let delta = rollout_batch as f64 * prompt_group as f64 * k_hat / update_batch as f64;
    StalenessReport {
        k_hat,
        delta,
        rho_stale: delta / (1.0 + delta),
    }
}

pub fn staleness_for(cfg: &OrchestratorConfig, k_hat: f64) -> StalenessReport {
    staleness(cfg.rollout_batch, cfg.prompt_group, k_hat, cfg.update_batch)
}

/// Running mean of accepted turns over the last [`K_HAT_WINDOW`] trajectories.
#[derive(Debug, Clone, Default)]
pub struct KHatTracker {
    recent: VecDeque<usize>,
}

impl KHatTracker {
    pub fn push(&mut self, turns: usize) {
        if self.recent.len() == K_HAT_WINDOW {
            self.recent.pop_front();
        }
        self.recent.push_back(turns);
    }

    pub fn value(&self) -> f64 {
        if self.recent.is_empty() {
            0.0
        } else {
            self.recent.iter().sum::<usize>() as f64 / self.recent.len() as f64
        }
    }
}

/// `(history, action)` pairs from trajectories whose task score exceeds
/// `threshold`. Turns with no recoverable action are dropped.
pub fn rft_filter<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>, threshold: f64) -> Vec<RftExample> {
    let out: Vec<RftExample> = trajectories
        .into_iter()
        .filter(|t| t.task_score > threshold)
        .flat_map(|t| t.turns.iter())
        .filter(|turn| turn.candidate.action.relaxed_valid)
        .map(|turn| RftExample {
            history: turn.history.clone(),
            features: turn.features.clone(),
            tokens: turn.candidate.tokens.clone(),
        })
        .collect();
    if out.is_empty() {
        log::warn!("no trajectory scored above {threshold}; RFT dataset is empty");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtiEvent {
    pub index: usize,
    pub cause: TriggerCause,
}

/// One accepted turn, as written to the line-delimited trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnLog {
    pub schema: u32,
    pub run_id: String,
    pub iteration: usize,
    pub task_id: String,
    pub group_index: usize,
    pub traj_index: usize,
    pub turn_index: usize,
    pub state_key: String,
    pub tokens: Vec<TokenId>,
    /// `[h, c, m]` per sampled thinking token.
    pub signals: Vec<[f64; 3]>,
    pub tti_event: Option<TtiEvent>,
    pub tds_attempts: usize,
    pub rejected_tokens: usize,
    /// `null` on the first turn.
    pub gamma: Option<f64>,
    pub phi: f64,
    pub reward: f64,
    pub old_log_prob: f64,
    pub strict_valid: bool,
    pub void: bool,
    pub truncated: bool,
    pub command: String,
    pub done: bool,
    pub task_score: Option<f64>,
}

impl TurnLog {
    pub fn from_turn(run_id: &str, iteration: usize, traj: &Trajectory, turn: &Turn) -> Self {
        let c = &turn.candidate;
        Self {
            schema: LOG_SCHEMA_VERSION,
            run_id: run_id.to_string(),
            iteration,
            task_id: traj.task_id.clone(),
            group_index: traj.group_index,
            traj_index: traj.traj_index,
            turn_index: turn.turn_index,
            state_key: turn.state_key.clone(),
            tokens: c.tokens.clone(),
            signals: c.signals.iter().map(|s| [s.h, s.c, s.m]).collect(),
            tti_event: c.trigger.map(|t| TtiEvent {
                index: t.index,
                cause: t.cause,
            }),
            tds_attempts: c.attempt,
            rejected_tokens: turn.rejected_tokens(),
            gamma: c.gamma.is_finite().then_some(c.gamma),
            phi: c.phi,
            reward: turn.reward,
            old_log_prob: c.old_log_prob,
            strict_valid: c.action.strict_valid,
            void: c.action.is_void(),
            truncated: c.truncated,
            command: c.action.executable().to_string(),
            done: turn.done,
            task_score: turn.task_score,
        }
    }
}

/// Append every accepted turn of `groups` in group, trajectory, turn order.
pub fn write_logs<W: Write + ?Sized>(out: &mut W, run_id: &str, iteration: usize, groups: &[RolloutGroup]) -> Result<(), RolloutError> {
    for g in groups {
        for traj in &g.trajectories {
            for turn in &traj.turns {
                let rec = TurnLog::from_turn(run_id, iteration, traj, turn);
                serde_json::to_writer(&mut *out, &rec).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}
