//! Toy autoregressive softmax policy.
//!
//! Logits are a linear map of a sparse feature vector made of
//!
//! * hashed state facts (observation, instruction and recent-memory facts),
//! * a bias feature,
//! * a bag of the last [`PREFIX_WINDOW`] tokens of the current turn, padded
//!   with a begin-of-turn slot.
//!
//! The state block is constant within a turn, so rollouts cache its logit
//! contribution and only add the prefix rows per token.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Observation, ParsedAction};
use crate::signal::{softmax, TokenDistribution};
use crate::tti::override_logits;
use crate::vocab::{TokenId, VOCAB_SIZE};

pub const PREFIX_WINDOW: usize = 4;

const CHECKPOINT_MAGIC: &[u8; 8] = b"TWPOLICY";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite gradient entry at feature {feature}, token {token}")]
    NonFiniteGradient { feature: usize, token: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sparse `(row, value)` pairs over the state block of the feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFeatures {
    pub entries: Vec<(usize, f64)>,
}

impl StateFeatures {
    pub fn from_facts<S: AsRef<str>>(facts: &[S], state_dim: usize) -> Self {
        let mut dense = vec![0.0; state_dim];
        for f in facts {
            dense[(fnv1a(f.as_ref().as_bytes()) % state_dim as u64) as usize] += 1.0;
        }
        let mut entries: Vec<(usize, f64)> = dense
            .into_iter()
            .enumerate()
            .filter(|(_, v)| *v != 0.0)
            .collect();
        entries.push((state_dim, 1.0));
        Self { entries }
    }
}

/// Coarse kind of an executed command, used as a memory fact.
pub fn command_kind(command: &str) -> &'static str {
    let c = command.trim();
    if c.starts_with("search[") {
        "search"
    } else if let Some(arg) = c.strip_prefix("click[").and_then(|r| r.strip_suffix(']')) {
        match arg {
            "buy" => "buy",
            "next >" | "< prev" | "back to search" => "nav",
            a if a.starts_with('p') && a[1..].chars().all(|ch| ch.is_ascii_digit()) && a.len() > 1 => "item",
            _ => "opt",
        }
    } else {
        "invalid"
    }
}

/// Facts for the current observation plus the recent-memory window.
pub fn state_facts(obs: &Observation, memory: &[(Observation, ParsedAction)]) -> Vec<String> {
    let mut facts = obs.facts.clone();
    for (age, (_, action)) in memory.iter().rev().enumerate() {
        let kind = command_kind(action.executable());
        if age == 0 {
            facts.push(format!("last:{kind}"));
        } else {
            facts.push(format!("hist:{kind}"));
        }
    }
    facts
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    state_dim: usize,
    vocab: usize,
    /// Row-major `feature_dim x vocab`.
    weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(state_dim: usize) -> Self {
        let vocab = VOCAB_SIZE;
        let feature_dim = state_dim + 1 + vocab + 1;
        Self {
            state_dim,
            vocab,
            weights: vec![0.0; feature_dim * vocab],
        }
    }

    pub fn random(state_dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(state_dim);
        for w in &mut p.weights {
            *w = rng.random_range(-scale..scale);
        }
        p
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.len() / self.vocab
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn prefix_row(&self, tok: TokenId) -> usize {
        self.state_dim + 1 + tok
    }

    pub fn bos_row(&self) -> usize {
        self.state_dim + 1 + self.vocab
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.vocab..(r + 1) * self.vocab]
    }

    /// Contribution of the state block (constant within a turn).
    pub fn state_logits(&self, state: &StateFeatures) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab];
        for &(r, x) in &state.entries {
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += x * w;
            }
        }
        out
    }

    /// Prefix rows active after `prefix`: the last `PREFIX_WINDOW` tokens,
    /// padded with the begin-of-turn slot.
    pub fn prefix_rows(&self, prefix: &[TokenId]) -> Vec<usize> {
        let start = prefix.len().saturating_sub(PREFIX_WINDOW);
        let mut rows: Vec<usize> = prefix[start..].iter().map(|&t| self.prefix_row(t)).collect();
        rows.extend(std::iter::repeat_n(self.bos_row(), PREFIX_WINDOW - rows.len()));
        rows
    }

    pub fn logits_cached(&self, state_logits: &[f64], prefix: &[TokenId]) -> Vec<f64> {
        let mut out = state_logits.to_vec();
        for r in self.prefix_rows(prefix) {
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w;
            }
        }
        out
    }

    pub fn logits(&self, state: &StateFeatures, prefix: &[TokenId]) -> Vec<f64> {
        self.logits_cached(&self.state_logits(state), prefix)
    }

    pub fn distribution(&self, state: &StateFeatures, prefix: &[TokenId]) -> TokenDistribution {
        TokenDistribution::from_logits(&self.logits(state, prefix))
    }

    pub fn scale_add(&mut self, grad: &[f64], lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w += lr * g;
        }
    }

    /// Binary checkpoint, all integers and floats little-endian:
    /// `b"TWPOLICY"`, `u32` version, `u32` vocab, `u32` feature_dim,
    /// `u32` state_dim, then `feature_dim * vocab` `f64` weights row-major by
    /// feature.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), PolicyError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [CHECKPOINT_VERSION, self.vocab as u32, self.feature_dim() as u32, self.state_dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, PolicyError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(PolicyError::Checkpoint("bad magic".into()));
        }
        let mut read_u32 = || -> Result<u32, PolicyError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = read_u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported version {version}")));
        }
        let vocab = read_u32()? as usize;
        let feature_dim = read_u32()? as usize;
        let state_dim = read_u32()? as usize;
        if vocab != VOCAB_SIZE || feature_dim != state_dim + vocab + 2 {
            return Err(PolicyError::Checkpoint(format!(
                "shape mismatch: vocab {vocab}, feature_dim {feature_dim}, state_dim {state_dim}"
            )));
        }
        let mut weights = vec![0.0; feature_dim * vocab];
        let mut b = [0u8; 8];
        for w in &mut weights {
            r.read_exact(&mut b)?;
            *w = f64::from_le_bytes(b);
        }
        Ok(Self {
            state_dim,
            vocab,
            weights,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// `0` selects argmax decoding.
    pub temperature: f64,
    /// `0` disables top-k filtering.
    pub top_k: usize,
    pub top_p: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
        }
    }
}

impl SamplerConfig {
    /// Validation-time decoding settings.
    pub fn validation() -> Self {
        Self {
            temperature: 0.6,
            top_k: 20,
            top_p: 0.95,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature = {} must be >= 0", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p = {} not in (0, 1]", self.top_p));
        }
        Ok(())
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draw a token. A forced id bypasses temperature and filtering entirely.
pub fn sample(logits: &[f64], cfg: &SamplerConfig, forced: Option<TokenId>, rng: &mut impl Rng) -> TokenId {
    if let Some(id) = forced {
        let z = override_logits(logits, id);
        return argmax(&z);
    }
    if cfg.temperature == 0.0 {
        return argmax(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / cfg.temperature).collect();
    let probs = softmax(&scaled);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    if cfg.top_k > 0 && cfg.top_k < order.len() {
        order.truncate(cfg.top_k);
    }
    if cfg.top_p < 1.0 {
        let mut cum = 0.0;
        let mut keep = order.len();
        for (n, &i) in order.iter().enumerate() {
            cum += probs[i];
            if cum >= cfg.top_p {
                keep = n + 1;
                break;
            }
        }
        order.truncate(keep);
    }
    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut cum = 0.0;
    for &i in &order {
        cum += probs[i];
        if u < cum {
            return i;
        }
    }
    *order.last().expect("non-empty vocabulary")
}

fn log_softmax_at(logits: &[f64], y: TokenId) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[y] - lse
}

/// `sum_t log softmax(logits_t)[tokens[t]]` with the turn prefix starting empty.
pub fn sequence_log_prob(params: &PolicyParams, state: &StateFeatures, tokens: &[TokenId]) -> f64 {
    sequence_log_prob_from(params, state, &[], tokens)
}

/// Log-probability of `tokens` continuing after `prefix`.
pub fn sequence_log_prob_from(
    params: &PolicyParams,
    state: &StateFeatures,
    prefix: &[TokenId],
    tokens: &[TokenId],
) -> f64 {
    let base = params.state_logits(state);
    let mut ctx = prefix.to_vec();
    let mut total = 0.0;
    for &y in tokens {
        total += log_softmax_at(&params.logits_cached(&base, &ctx), y);
        ctx.push(y);
    }
    total
}

/// Like [`sequence_log_prob`] but only positions with `include[t]` count.
pub fn sequence_log_prob_masked(
    params: &PolicyParams,
    state: &StateFeatures,
    tokens: &[TokenId],
    include: &[bool],
) -> f64 {
    let base = params.state_logits(state);
    let mut total = 0.0;
    for (t, &y) in tokens.iter().enumerate() {
        if include[t] {
            total += log_softmax_at(&params.logits_cached(&base, &tokens[..t]), y);
        }
    }
    total
}

/// Exact categorical `KL(pi_theta || pi_ref)` at one context.
pub fn kl_to_reference(
    params: &PolicyParams,
    reference: &PolicyParams,
    state: &StateFeatures,
    prefix: &[TokenId],
) -> f64 {
    let p = softmax(&params.logits(state, prefix));
    let q = softmax(&reference.logits(state, prefix));
    categorical_kl(&p, &q)
}

pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(f64::MIN_POSITIVE).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// Per-sequence quantities needed by the objective and its gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceStats {
    pub log_prob: f64,
    /// Sum of per-position KL to the reference over included positions.
    pub kl_sum: f64,
    pub positions: usize,
}

/// Log-prob and KL sums over included positions, optionally accumulating
/// `lp_scale * grad(log_prob) + kl_scale * grad(kl_sum)` into `grad`.
pub fn sequence_stats(
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    state: &StateFeatures,
    tokens: &[TokenId],
    include: &[bool],
    grad: Option<(&mut [f64], f64, f64)>,
) -> SequenceStats {
    let v = params.vocab();
    let base = params.state_logits(state);
    let ref_base = reference.map(|r| r.state_logits(state));
    let mut log_prob = 0.0;
    let mut kl_sum = 0.0;
    let mut positions = 0;
    let mut grad = grad;
    // Accumulated logit-gradient for the state block (shared across positions).
    let mut state_acc = vec![0.0; v];
    let mut dz = vec![0.0; v];

    for (t, &y) in tokens.iter().enumerate() {
        if !include[t] {
            continue;
        }
        positions += 1;
        let prefix = &tokens[..t];
        let z = params.logits_cached(&base, prefix);
        let p = softmax(&z);
        log_prob += log_softmax_at(&z, y);

        dz.iter_mut().for_each(|d| *d = 0.0);
        let (lp_scale, kl_scale) = grad.as_ref().map_or((0.0, 0.0), |g| (g.1, g.2));
        if lp_scale != 0.0 {
            for (j, d) in dz.iter_mut().enumerate() {
                *d -= lp_scale * p[j];
            }
            dz[y] += lp_scale;
        }
        if let (Some(r), Some(rb)) = (reference, ref_base.as_ref()) {
            let q = softmax(&r.logits_cached(rb, prefix));
            let kl = categorical_kl(&p, &q);
            kl_sum += kl;
            if kl_scale != 0.0 {
                // d KL / d z_j = p_j * (ln p_j - ln q_j - KL)
                for j in 0..v {
                    if p[j] > 0.0 {
                        dz[j] += kl_scale * p[j] * (p[j].ln() - q[j].max(f64::MIN_POSITIVE).ln() - kl);
                    }
                }
            }
        }
        if let Some((g, _, _)) = grad.as_mut() {
            for (a, d) in state_acc.iter_mut().zip(&dz) {
                *a += d;
            }
            for r in params.prefix_rows(prefix) {
                let row = &mut g[r * v..(r + 1) * v];
                for (w, d) in row.iter_mut().zip(&dz) {
                    *w += d;
                }
            }
        }
    }
    if let Some((g, _, _)) = grad {
        for &(r, x) in &state.entries {
            let row = &mut g[r * v..(r + 1) * v];
            for (w, a) in row.iter_mut().zip(&state_acc) {
                *w += x * a;
            }
        }
    }
    SequenceStats {
        log_prob,
        kl_sum,
        positions,
    }
}

/// One supervised example: rendered history, its features and target tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RftExample {
    pub history: String,
    pub features: StateFeatures,
    pub tokens: Vec<TokenId>,
}

pub fn mean_nll(params: &PolicyParams, dataset: &[RftExample]) -> f64 {
    let total: f64 = dataset
        .iter()
        .map(|ex| -sequence_log_prob(params, &ex.features, &ex.tokens))
        .sum();
    total / dataset.len() as f64
}

/// Gradient of the mean sequence NLL.
pub fn nll_gradient(params: &PolicyParams, dataset: &[RftExample]) -> Vec<f64> {
    let mut grad = vec![0.0; params.weights().len()];
    let scale = -1.0 / dataset.len() as f64;
    for ex in dataset {
        let include = vec![true; ex.tokens.len()];
        sequence_stats(params, None, &ex.features, &ex.tokens, &include, Some((&mut grad, scale, 0.0)));
    }
    grad
}

/// One gradient-descent step on the mean sequence negative log-likelihood.
pub fn rft_update(params: &PolicyParams, dataset: &[RftExample], lr: f64) -> Result<PolicyParams, PolicyError> {
    if dataset.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let grad = nll_gradient(params, dataset);
    check_finite(&grad, params.vocab())?;
    let mut next = params.clone();
    // grad is of the NLL; descend.
    next.scale_add(&grad, -lr);
    Ok(next)
}

pub fn check_finite(grad: &[f64], vocab: usize) -> Result<(), PolicyError> {
    match grad.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(PolicyError::NonFiniteGradient {
            feature: i / vocab,
            token: i % vocab,
        }),
        None => Ok(()),
    }
}
