//! Token-level thinking intervention.
//!
//! A per-turn state machine fed one thinking token at a time. Once at least
//! `l_min` thinking tokens exist and the trailing-window mean of
//! `|M_t - M_{t-1}|` drops below `epsilon`, the controller fires exactly once:
//! the next tokens are forced to `</think>`, `\n`, `<action>` by logit
//! overwrite, after which action tokens are sampled freely. Reaching the
//! thinking budget `l_max` forces the same suffix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{window_mean_delta, UncertaintyTrace};
use crate::vocab::{TokenId, ACTION_OPEN, NEWLINE, THINK_CLOSE};

/// Magnitude used in place of an infinite logit.
pub const LARGE_LOGIT: f64 = f64::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum TtiError {
    #[error("invalid thinking-intervention config: {0}")]
    Config(String),
    #[error("observe_token called after the forced suffix was fully emitted")]
    AfterTurnEnd,
    #[error("trace has {trace} samples but {observed} thinking tokens were observed")]
    TraceMismatch { trace: usize, observed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtiConfig {
    pub enabled: bool,
    pub l_min: usize,
    pub l_max: usize,
    pub epsilon: f64,
    pub window_n: usize,
    pub queue: Vec<TokenId>,
}

impl Default for TtiConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            l_min: 21,
            l_max: 450,
            epsilon: 1e-4,
            window_n: 20,
            queue: vec![THINK_CLOSE, NEWLINE, ACTION_OPEN],
        }
    }
}

impl TtiConfig {
    pub fn validate(&self) -> Result<(), TtiError> {
        if self.l_min < self.window_n + 1 {
            return Err(TtiError::Config(format!(
                "l_min = {} must be >= window_n + 1 = {}",
                self.l_min,
                self.window_n + 1
            )));
        }
        if self.l_min >= self.l_max {
            return Err(TtiError::Config(format!(
                "l_min = {} must be < l_max = {}",
                self.l_min, self.l_max
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(TtiError::Config(format!("epsilon = {} must be > 0", self.epsilon)));
        }
        if self.queue.first() != Some(&THINK_CLOSE) {
            return Err(TtiError::Config("queue must start with </think>".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerCause {
    /// Windowed signal variation fell below tolerance.
    Window,
    /// Thinking budget reached.
    Budget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trigger {
    /// 1-based thinking-token index `t*` at which the rule fired.
    pub index: usize,
    pub cause: TriggerCause,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlDecision {
    Continue,
    ForceToken(TokenId),
    /// Stop generating the turn (response length cap).
    Terminate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TtiState {
    /// Thinking tokens observed so far.
    pub t: usize,
    pub stop_fired: bool,
    pub queue_cursor: Option<usize>,
    pub trigger: Option<Trigger>,
    finished: bool,
}

impl TtiState {
    pub fn trigger_index(&self) -> Option<usize> {
        self.trigger.map(|t| t.index)
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }
}

#[derive(Debug, Clone)]
pub struct TtiController {
    cfg: TtiConfig,
    state: TtiState,
}

impl TtiController {
    pub fn new(cfg: TtiConfig) -> Result<Self, TtiError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: TtiState::default(),
        })
    }

    pub fn config(&self) -> &TtiConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TtiState {
        &self.state
    }

    pub fn reset_turn(&mut self) {
        self.state = reset_turn(&self.state);
    }

    /// Feed the controller the thinking token just emitted (its sample is
    /// already the last entry of `trace`) and get the decision for the next
    /// token.
    pub fn observe_token(&mut self, trace: &UncertaintyTrace) -> Result<ControlDecision, TtiError> {
        let st = &mut self.state;
        if st.finished {
            return Err(TtiError::AfterTurnEnd);
        }
        st.t += 1;

        if let Some(cursor) = st.queue_cursor {
            return Ok(match self.cfg.queue.get(cursor) {
                Some(&tok) => {
                    st.queue_cursor = Some(cursor + 1);
                    ControlDecision::ForceToken(tok)
                }
                None => {
                    st.finished = true;
                    ControlDecision::Continue
                }
            });
        }

        if trace.len() < st.t {
            return Err(TtiError::TraceMismatch {
                trace: trace.len(),
                observed: st.t,
            });
        }

        let t = st.t;
        let cause = if self.cfg.enabled && !st.stop_fired && t > self.cfg.l_min {
            // 1-based t is 0-based index t - 1; l_min >= window_n + 1 makes it valid.
            let mean = window_mean_delta(&trace.m_values()[..t], t - 1, self.cfg.window_n)
                .expect("window computable once t > l_min");
            (mean < self.cfg.epsilon).then_some(TriggerCause::Window)
        } else {
            None
        };
        let cause = cause.or((t >= self.cfg.l_max && !st.stop_fired).then_some(TriggerCause::Budget));

        match cause {
            Some(cause) => {
                st.stop_fired = true;
                st.trigger = Some(Trigger { index: t, cause });
                st.queue_cursor = Some(1);
                Ok(ControlDecision::ForceToken(self.cfg.queue[0]))
            }
            None => Ok(ControlDecision::Continue),
        }
    }

    /// Number of tokens still owed from the forced queue.
    pub fn pending_forced(&self) -> usize {
        match self.state.queue_cursor {
            Some(c) if !self.state.finished => self.cfg.queue.len().saturating_sub(c),
            _ => 0,
        }
    }
}

pub fn reset_turn(_state: &TtiState) -> TtiState {
    TtiState::default()
}

/// Replace logits so that softmax puts all mass on `forced_id`.
pub fn override_logits(logits: &[f64], forced_id: TokenId) -> Vec<f64> {
    assert!(forced_id < logits.len(), "forced id {forced_id} outside vocabulary");
    let mut out = vec![-LARGE_LOGIT; logits.len()];
    out[forced_id] = LARGE_LOGIT;
    out
}

/// Hard cap on total tokens per turn.
pub fn response_limit(total_tokens: usize, max_response: usize) -> ControlDecision {
    if total_tokens >= max_response {
        ControlDecision::Terminate
    } else {
        ControlDecision::Continue
    }
}
