//! Turn-level dynamical sampling.
//!
//! Each turn is summarized by the geometric mean `Phi` of its fused token
//! signals. When `|Phi_k - Phi_{k-1}|` falls below `eta` the turn is judged a
//! near-repeat of the previous one and regenerated from the same state, up to
//! `b_max` times. The first turn of a trajectory has no predecessor and is
//! always accepted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::UncertaintyTrace;

#[derive(Debug, Error, PartialEq)]
pub enum TdsError {
    #[error("turn produced no tokens")]
    EmptyTrace,
    #[error("invalid turn-sampling config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdsConfig {
    pub enabled: bool,
    pub eta: f64,
    pub b_max: usize,
}

impl Default for TdsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            eta: 1e-3,
            b_max: 3,
        }
    }
}

impl TdsConfig {
    pub fn validate(&self) -> Result<(), TdsError> {
        if !(self.eta > 0.0) {
            return Err(TdsError::Config(format!("eta = {} must be > 0", self.eta)));
        }
        if self.b_max == 0 {
            return Err(TdsError::Config("b_max must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TdsDecision {
    Accept,
    Regenerate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TurnSignalState {
    pub phi_prev: Option<f64>,
    pub resample_count: usize,
}

/// Geometric mean of `max(M_t, m_floor)` over the turn, in log space.
pub fn turn_signal(trace: &UncertaintyTrace, m_floor: f64) -> Result<f64, TdsError> {
    let m = trace.m_values();
    if m.is_empty() {
        return Err(TdsError::EmptyTrace);
    }
    let mean_log = m.iter().map(|&x| x.max(m_floor).ln()).sum::<f64>() / m.len() as f64;
    Ok(mean_log.exp())
}

/// `|phi - phi_prev|`, or `+inf` on the first turn.
pub fn turn_delta(phi: f64, phi_prev: Option<f64>) -> f64 {
    match phi_prev {
        Some(prev) => (phi - prev).abs(),
        None => f64::INFINITY,
    }
}

/// Accept or regenerate the candidate whose signal is `phi`. Acceptance
/// commits `phi` as the reference for the next turn and clears the counter.
pub fn decide(gamma: f64, phi: f64, state: &mut TurnSignalState, cfg: &TdsConfig) -> TdsDecision {
    if cfg.enabled && gamma < cfg.eta && state.resample_count < cfg.b_max {
        state.resample_count += 1;
        TdsDecision::Regenerate
    } else {
        state.phi_prev = Some(phi);
        state.resample_count = 0;
        TdsDecision::Accept
    }
}

/// Outcome of judging one candidate generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub phi: f64,
    pub gamma: f64,
    pub decision: TdsDecision,
    /// 1-based generation attempt for this turn.
    pub attempt: usize,
}

/// Per-trajectory wrapper around [`TurnSignalState`].
#[derive(Debug, Clone)]
pub struct TdsController {
    cfg: TdsConfig,
    m_floor: f64,
    state: TurnSignalState,
}

impl TdsController {
    pub fn new(cfg: TdsConfig, m_floor: f64) -> Result<Self, TdsError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            m_floor,
            state: TurnSignalState::default(),
        })
    }

    pub fn state(&self) -> &TurnSignalState {
        &self.state
    }

    pub fn judge(&mut self, trace: &UncertaintyTrace) -> Result<Verdict, TdsError> {
        let phi = turn_signal(trace, self.m_floor)?;
        Ok(self.judge_signal(phi))
    }

    pub fn judge_signal(&mut self, phi: f64) -> Verdict {
        let attempt = self.state.resample_count + 1;
        let gamma = turn_delta(phi, self.state.phi_prev);
        let decision = decide(gamma, phi, &mut self.state, &self.cfg);
        Verdict {
            phi,
            gamma,
            decision,
            attempt,
        }
    }
}
