//! Scripted demonstrations and the supervised warm start.
//!
//! The demonstrator acts like the scripted expert but talks like a hesitant
//! model: some turns fall into a loop of the hesitation token, and a share of
//! those loops end the response without ever producing an action. Fitting the
//! policy to these turns gives a base model with the same failure modes the
//! controllers target.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::env::{validate_relaxed, EnvConfig, Environment, Observation, ParsedAction};
use crate::par::{self, ExecMode};
use crate::policy::{sequence_stats, state_facts, PolicyParams, RftExample, StateFeatures};
use crate::rollout::build_memory_context;
use crate::vocab::{
    TokenId, Vocabulary, ACTION_CLOSE, ACTION_OPEN, ATTRIBUTES, CATEGORIES, CLICK, DISCOURSE, END, NEWLINE, SEARCH,
    SLOT_BASE, SLOT_COUNT, THINK_CLOSE, THINK_OPEN,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    /// Demonstration episodes.
    pub episodes: usize,
    pub max_turns: usize,
    pub memory_window: usize,
    pub min_thinking: usize,
    pub max_thinking: usize,
    /// Probability that a turn contains a hesitation loop.
    pub hesitation_prob: f64,
    pub min_loop: usize,
    pub max_loop: usize,
    /// Share of loops that end the response instead of closing the thought.
    pub loop_end_prob: f64,
    /// Probability of skipping the closing thinking tag.
    pub sloppy_prob: f64,
    /// Probability of replacing the expert command with a random one.
    pub noise_prob: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            episodes: 300,
            max_turns: 15,
            memory_window: 2,
            min_thinking: 2,
            max_thinking: 8,
            hesitation_prob: 0.35,
            min_loop: 40,
            max_loop: 200,
            loop_end_prob: 0.3,
            sloppy_prob: 0.1,
            noise_prob: 0.1,
        }
    }
}

impl DemoConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("hesitation_prob", self.hesitation_prob),
            ("loop_end_prob", self.loop_end_prob),
            ("sloppy_prob", self.sloppy_prob),
            ("noise_prob", self.noise_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} not in [0, 1]"));
            }
        }
        if self.min_thinking > self.max_thinking || self.min_loop > self.max_loop || self.min_loop == 0 {
            return Err("thinking and loop length bounds must be ordered and positive".into());
        }
        if self.max_turns == 0 || self.memory_window == 0 {
            return Err("max_turns and memory_window must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStartConfig {
    pub enabled: bool,
    pub demo: DemoConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            demo: DemoConfig::default(),
            epochs: 120,
            lr: 40.0,
            batch: 256,
        }
    }
}

fn random_command(rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let vocab = Vocabulary::get();
    match rng.random_range(0..3) {
        0 => vec![SEARCH, vocab.id(CATEGORIES.choose(rng).unwrap()).unwrap()],
        1 => vec![CLICK, SLOT_BASE + rng.random_range(0..SLOT_COUNT)],
        _ => vec![CLICK, vocab.id(ATTRIBUTES.choose(rng).unwrap()).unwrap()],
    }
}

/// One demonstrated response for the current state.
pub fn demo_turn<E: Environment>(env: &E, cfg: &DemoConfig, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let vocab = Vocabulary::get();
    let hmm = vocab.hesitation_token();
    let keywords = env.keywords();
    let fillers: Vec<TokenId> = DISCOURSE
        .iter()
        .map(|w| vocab.id(w).unwrap())
        .filter(|&t| t != hmm)
        .collect();

    let mut out = vec![THINK_OPEN];
    for _ in 0..rng.random_range(cfg.min_thinking..=cfg.max_thinking) {
        let pool = if !keywords.is_empty() && rng.random_bool(0.4) { &keywords } else { &fillers };
        out.push(*pool.choose(rng).unwrap());
    }
    if rng.random_bool(cfg.hesitation_prob) {
        out.extend(std::iter::repeat_n(hmm, rng.random_range(cfg.min_loop..=cfg.max_loop)));
        if rng.random_bool(cfg.loop_end_prob) {
            out.push(END);
            return out;
        }
    }
    if !rng.random_bool(cfg.sloppy_prob) {
        out.extend([THINK_CLOSE, NEWLINE]);
    }
    out.push(ACTION_OPEN);
    if rng.random_bool(cfg.noise_prob) {
        out.extend(random_command(rng));
    } else {
        out.extend(env.expert_command(rng));
    }
    out.extend([ACTION_CLOSE, END]);
    out
}

/// Run the demonstrator on freshly generated tasks and record every turn.
pub fn demonstrations(env_cfg: &EnvConfig, cfg: &DemoConfig, state_dim: usize, seed: u64) -> Vec<RftExample> {
    let vocab = Vocabulary::get();
    let mut out = Vec::new();
    for ep in 0..cfg.episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[ep as u64]));
        let mut env = env_cfg.make_task(format!("demo{ep}"), derive_seed(seed, &[ep as u64, 1]), cfg.max_turns);
        let mut obs: Observation = env.reset();
        let mut memory: Vec<(Observation, ParsedAction)> = Vec::new();
        for _ in 0..cfg.max_turns {
            let window = &memory[memory.len().saturating_sub(cfg.memory_window)..];
            let features = StateFeatures::from_facts(&state_facts(&obs, window), state_dim);
            let history = build_memory_context(env.prompt(), &memory, &obs, cfg.memory_window);
            let tokens = demo_turn(&env, cfg, &mut rng);
            let action = validate_relaxed(&vocab.render(&tokens, &obs.slot_targets));
            out.push(RftExample {
                history,
                features,
                tokens,
            });
            let Ok(step) = env.step(action.executable()) else {
                break;
            };
            memory.push((obs, action));
            obs = step.observation;
            if step.done {
                break;
            }
        }
    }
    out
}

/// Mean per-token negative log-likelihood.
pub fn token_nll(params: &PolicyParams, data: &[RftExample], mode: ExecMode) -> f64 {
    let parts = par::map(mode, data, |ex| {
        let include = vec![true; ex.tokens.len()];
        let st = sequence_stats(params, None, &ex.features, &ex.tokens, &include, None);
        (-st.log_prob, st.positions)
    });
    let (nll, n) = parts.iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    nll / n.max(1) as f64
}

/// Minibatch gradient descent on the per-token NLL of `data`.
pub fn warm_start(
    mut params: PolicyParams,
    data: &[RftExample],
    cfg: &WarmStartConfig,
    seed: u64,
    mode: ExecMode,
) -> PolicyParams {
    use rand::seq::SliceRandom;
    if data.is_empty() {
        return params;
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_weights = params.weights().len();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * (1.0 - epoch as f64 / cfg.epochs as f64);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch.max(1)) {
            let positions: usize = batch.iter().map(|&i| data[i].tokens.len()).sum();
            let scale = 1.0 / positions.max(1) as f64;
            let grad = par::chunked_sum(mode, batch, 16, n_weights, |chunk, acc| {
                for &i in chunk {
                    let ex = &data[i];
                    let include = vec![true; ex.tokens.len()];
                    sequence_stats(&params, None, &ex.features, &ex.tokens, &include, Some((acc, scale, 0.0)));
                }
            });
            params.scale_add(&grad, lr);
        }
        log::debug!("warm start epoch {epoch}: token nll {:.4}", token_nll(&params, data, mode));
    }
    params
}
