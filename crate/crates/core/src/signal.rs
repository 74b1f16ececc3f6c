//! Token-level uncertainty signal.
//!
//! Every decoding step produces a categorical distribution over the
//! vocabulary. From it we derive the Shannon entropy `H_t`, the top-j
//! confidence `C_t` (negative mean log-probability of the `j` most likely
//! tokens) and, after normalizing both against the extrema seen so far in
//! the current turn, the fused stability signal
//!
//! ```text
//! M_t = alpha * H~_t + (1 - alpha) * (1 - C~_t)
//! ```
//!
//! The trailing-window mean of `|M_t - M_{t-1}|` is what the thinking
//! controller watches (see [`crate::tti`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Spans narrower than this are treated as degenerate and normalize to 0.5.
pub const DEGENERATE_SPAN: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("distribution needs at least 2 entries, got {0}")]
    TooSmall(usize),
    #[error("probability at index {index} is invalid: {value}")]
    InvalidEntry { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("top_j = {top_j} outside 1..={vocab}")]
    TopJOutOfRange { top_j: usize, vocab: usize },
    #[error("window of {window} deltas needs index >= {needed}, got {index}")]
    InsufficientHistory {
        index: usize,
        window: usize,
        needed: usize,
    },
    #[error("index {index} out of bounds for {len} values")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("invalid signal config: {0}")]
    Config(String),
    #[error("raw signal value must be finite and non-negative, got {0}")]
    InvalidRaw(f64),
}

/// Probability vector over the vocabulary at one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, SignalError> {
        if probs.len() < 2 {
            return Err(SignalError::TooSmall(probs.len()));
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(SignalError::InvalidEntry { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(SignalError::NotNormalized(sum));
        }
        Ok(Self { probs })
    }

    /// Numerically stable softmax. Logits must be finite.
    pub fn from_logits(logits: &[f64]) -> Self {
        Self {
            probs: softmax(logits),
        }
    }

    pub fn uniform(vocab: usize) -> Self {
        Self {
            probs: vec![1.0 / vocab as f64; vocab],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// How raw entropy and confidence are mapped into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Running per-turn extrema (what online decoding can see).
    Running,
    /// Fixed bounds `[0, h_max]` and `[0, c_max]`; values are clamped.
    Fixed { h_max: f64, c_max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalConfig {
    pub alpha: f64,
    pub top_j: usize,
    pub prob_floor: f64,
    pub m_floor: f64,
    pub normalization: Normalization,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            top_j: 20,
            prob_floor: 1e-10,
            m_floor: 1e-6,
            normalization: Normalization::Running,
        }
    }
}

impl SignalConfig {
    /// Fixed-bounds variant: `[0, ln V]` for entropy and `[0, -ln prob_floor]`
    /// for confidence.
    pub fn with_fixed_bounds(mut self, vocab: usize) -> Self {
        self.normalization = Normalization::Fixed {
            h_max: (vocab as f64).ln(),
            c_max: -self.prob_floor.ln(),
        };
        self
    }

    pub fn validate(&self, vocab: usize) -> Result<(), SignalError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SignalError::Config(format!("alpha = {} not in [0, 1]", self.alpha)));
        }
        if self.top_j == 0 || self.top_j > vocab {
            return Err(SignalError::TopJOutOfRange {
                top_j: self.top_j,
                vocab,
            });
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 1.0) {
            return Err(SignalError::Config(format!(
                "prob_floor = {} not in (0, 1)",
                self.prob_floor
            )));
        }
        if !(self.m_floor > 0.0 && self.m_floor < 1.0) {
            return Err(SignalError::Config(format!("m_floor = {} not in (0, 1)", self.m_floor)));
        }
        if let Normalization::Fixed { h_max, c_max } = self.normalization {
            if !(h_max > 0.0 && c_max > 0.0) {
                return Err(SignalError::Config("fixed bounds must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Shannon entropy in nats; `0 * ln 0` counts as 0.
pub fn entropy(dist: &TokenDistribution) -> f64 {
    let h: f64 = dist
        .probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// Negative mean log-probability of the `top_j` largest probabilities.
///
/// Ties are broken by ascending token index, so the selected set is
/// deterministic. Zero probabilities are clamped to `prob_floor` before the
/// logarithm.
pub fn top_j_confidence(dist: &TokenDistribution, cfg: &SignalConfig) -> Result<f64, SignalError> {
    let vocab = dist.len();
    let j = cfg.top_j;
    if j == 0 || j > vocab {
        return Err(SignalError::TopJOutOfRange { top_j: j, vocab });
    }
    let mut order: Vec<usize> = (0..vocab).collect();
    let by_prob_desc = |a: &usize, b: &usize| {
        dist.probs[*b]
            .total_cmp(&dist.probs[*a])
            .then_with(|| a.cmp(b))
    };
    if j < vocab {
        order.select_nth_unstable_by(j - 1, by_prob_desc);
    }
    let sum: f64 = order[..j]
        .iter()
        .map(|&i| dist.probs[i].max(cfg.prob_floor).ln())
        .sum();
    Ok(-sum / j as f64)
}

/// `alpha * h_norm + (1 - alpha) * (1 - c_norm)`.
pub fn fuse_signal(h_norm: f64, c_norm: f64, alpha: f64) -> f64 {
    alpha * h_norm + (1.0 - alpha) * (1.0 - c_norm)
}

/// Mean of the `n + 1` absolute deltas ending at index `t` (0-based):
/// `(1/(n+1)) * sum_{i=0..=n} |m[t-i] - m[t-i-1]|`.
pub fn window_mean_delta(m_values: &[f64], t: usize, n: usize) -> Result<f64, SignalError> {
    if t >= m_values.len() {
        return Err(SignalError::IndexOutOfBounds {
            index: t,
            len: m_values.len(),
        });
    }
    if t < n + 1 {
        return Err(SignalError::InsufficientHistory {
            index: t,
            window: n + 1,
            needed: n + 1,
        });
    }
    let sum: f64 = (0..=n)
        .map(|i| (m_values[t - i] - m_values[t - i - 1]).abs())
        .sum();
    Ok(sum / (n + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySample {
    pub h: f64,
    pub c: f64,
    pub h_norm: f64,
    pub c_norm: f64,
    pub m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Extrema {
    min: f64,
    max: f64,
}

impl Extrema {
    fn include(&mut self, x: f64) {
        self.min = self.min.min(x);
        self.max = self.max.max(x);
    }

    fn normalize(&self, x: f64) -> f64 {
        let span = self.max - self.min;
        if span < DEGENERATE_SPAN {
            0.5
        } else {
            ((x - self.min) / span).clamp(0.0, 1.0)
        }
    }
}

fn normalize_fixed(x: f64, upper: f64) -> f64 {
    if upper < DEGENERATE_SPAN {
        0.5
    } else {
        (x / upper).clamp(0.0, 1.0)
    }
}

/// Per-turn sequence of uncertainty samples with running extrema.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UncertaintyTrace {
    samples: Vec<UncertaintySample>,
    m_values: Vec<f64>,
    h_range: Option<Extrema>,
    c_range: Option<Extrema>,
}

impl UncertaintyTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn samples(&self) -> &[UncertaintySample] {
        &self.samples
    }

    /// Fused signal values in emission order.
    pub fn m_values(&self) -> &[f64] {
        &self.m_values
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn h_min(&self) -> Option<f64> {
        self.h_range.map(|e| e.min)
    }

    pub fn h_max(&self) -> Option<f64> {
        self.h_range.map(|e| e.max)
    }

    pub fn c_min(&self) -> Option<f64> {
        self.c_range.map(|e| e.min)
    }

    pub fn c_max(&self) -> Option<f64> {
        self.c_range.map(|e| e.max)
    }

    /// Fold raw `(h, c)` into the running extrema, normalize, fuse and append.
    pub fn append_and_normalize(
        &mut self,
        h: f64,
        c: f64,
        cfg: &SignalConfig,
    ) -> Result<UncertaintySample, SignalError> {
        for x in [h, c] {
            if !x.is_finite() || x < 0.0 {
                return Err(SignalError::InvalidRaw(x));
            }
        }
        let h_range = self.h_range.get_or_insert(Extrema { min: h, max: h });
        h_range.include(h);
        let h_range = *h_range;
        let c_range = self.c_range.get_or_insert(Extrema { min: c, max: c });
        c_range.include(c);
        let c_range = *c_range;

        let (h_norm, c_norm) = match cfg.normalization {
            Normalization::Running => (h_range.normalize(h), c_range.normalize(c)),
            Normalization::Fixed { h_max, c_max } => {
                (normalize_fixed(h, h_max), normalize_fixed(c, c_max))
            }
        };
        let sample = UncertaintySample {
            h,
            c,
            h_norm,
            c_norm,
            m: fuse_signal(h_norm, c_norm, cfg.alpha),
        };
        self.samples.push(sample);
        self.m_values.push(sample.m);
        Ok(sample)
    }

    /// Entropy + confidence of `dist`, then [`Self::append_and_normalize`].
    pub fn observe(
        &mut self,
        dist: &TokenDistribution,
        cfg: &SignalConfig,
    ) -> Result<UncertaintySample, SignalError> {
        let h = entropy(dist);
        let c = top_j_confidence(dist, cfg)?;
        self.append_and_normalize(h, c, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> TokenDistribution {
        TokenDistribution::new(p.to_vec()).unwrap()
    }

    fn cfg_j(j: usize) -> SignalConfig {
        SignalConfig {
            top_j: j,
            ..SignalConfig::default()
        }
    }

    #[test]
    fn entropy_uniform_and_one_hot() {
        assert!((entropy(&TokenDistribution::uniform(4)) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&dist(&[1.0, 0.0, 0.0, 0.0])), 0.0);
    }

    #[test]
    fn entropy_gap_between_pair_and_one_hot_is_ln_two() {
        let pair = entropy(&dist(&[0.5, 0.5, 0.0, 0.0]));
        let one_hot = entropy(&dist(&[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(pair - one_hot, 2f64.ln());
    }

    #[test]
    fn rejects_invalid_distributions() {
        assert_eq!(TokenDistribution::new(vec![1.0]), Err(SignalError::TooSmall(1)));
        assert!(matches!(
            TokenDistribution::new(vec![1.2, -0.2]),
            Err(SignalError::InvalidEntry { index: 1, .. })
        ));
        assert!(matches!(
            TokenDistribution::new(vec![0.5, 0.4]),
            Err(SignalError::NotNormalized(_))
        ));
    }

    #[test]
    fn confidence_examples() {
        let c = top_j_confidence(&dist(&[0.5, 0.5, 0.0, 0.0]), &cfg_j(2)).unwrap();
        assert!((c - 2f64.ln()).abs() < 1e-12);
        let c = top_j_confidence(&dist(&[1.0, 0.0, 0.0, 0.0]), &cfg_j(1)).unwrap();
        assert_eq!(c, 0.0);
        // -ln(1e-10) / 2, 40-digit reference value.
        let c = top_j_confidence(&dist(&[1.0, 0.0, 0.0, 0.0]), &cfg_j(2)).unwrap();
        assert!((c - 11.512_925_464_970_228).abs() < 1e-12);
    }

    #[test]
    fn confidence_rejects_bad_top_j() {
        let d = dist(&[0.5, 0.5]);
        assert!(top_j_confidence(&d, &cfg_j(3)).is_err());
        assert!(top_j_confidence(&d, &cfg_j(0)).is_err());
    }

    #[test]
    fn first_sample_uses_degenerate_span() {
        let mut trace = UncertaintyTrace::new();
        let s = trace
            .append_and_normalize(0.7, 2.0, &SignalConfig::default())
            .unwrap();
        assert_eq!((s.h_norm, s.c_norm), (0.5, 0.5));
        assert!((s.m - 0.5).abs() < 1e-12);
    }

    #[test]
    fn running_normalization_examples() {
        let cfg = SignalConfig::default();
        let mut trace = UncertaintyTrace::new();
        trace.append_and_normalize(0.0, 1.0, &cfg).unwrap();
        trace.append_and_normalize(1.0, 1.0, &cfg).unwrap();
        let s = trace.append_and_normalize(0.5, 1.0, &cfg).unwrap();
        assert!((s.h_norm - 0.5).abs() < 1e-12);

        let mut trace = UncertaintyTrace::new();
        trace.append_and_normalize(0.2, 1.0, &cfg).unwrap();
        trace.append_and_normalize(0.8, 1.0, &cfg).unwrap();
        let s = trace.append_and_normalize(0.8, 1.0, &cfg).unwrap();
        assert_eq!(s.h_norm, 1.0);
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse_signal(1.0, 0.0, 0.4), 1.0);
        for alpha in [0.0, 0.3, 1.0] {
            assert_eq!(fuse_signal(0.0, 1.0, alpha), 0.0);
        }
        assert!((fuse_signal(0.5, 0.5, 0.4) - 0.5).abs() < 1e-12);
    }

    fn brute_window(m: &[f64], t: usize, n: usize) -> f64 {
        let mut acc = 0.0;
        let mut count = 0;
        for i in (t - n)..=t {
            acc += (m[i] - m[i - 1]).abs();
            count += 1;
        }
        acc / count as f64
    }

    #[test]
    fn window_examples() {
        assert_eq!(window_mean_delta(&[0.3; 10], 9, 4).unwrap(), 0.0);
        let alternating: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        for t in 2..12 {
            assert_eq!(window_mean_delta(&alternating, t, 1).unwrap(), 1.0);
        }
        let m = [0.0, 0.1, 0.3, 0.35];
        let got = window_mean_delta(&m, 3, 2).unwrap();
        assert!((got - 0.116_666_666_666_666_67).abs() < 1e-12);
        assert!((got - brute_window(&m, 3, 2)).abs() < 1e-15);
    }

    #[test]
    fn window_requires_history() {
        assert!(matches!(
            window_mean_delta(&[0.0, 0.1, 0.2], 2, 2),
            Err(SignalError::InsufficientHistory { .. })
        ));
        assert!(window_mean_delta(&[0.0, 0.1], 5, 0).is_err());
    }

    #[test]
    fn tail_mass_discrimination() {
        // Same top-1 probability, tail concentrated vs spread over ten tokens.
        let v = 12;
        let mut concentrated = vec![0.0; v];
        concentrated[0] = 0.6;
        concentrated[1] = 0.4;
        let mut spread = vec![0.0; v];
        spread[0] = 0.6;
        for p in spread.iter_mut().skip(1).take(10) {
            *p = 0.04;
        }
        let cfg = SignalConfig {
            top_j: 1,
            ..SignalConfig::default()
        }
        .with_fixed_bounds(v);
        let m_of = |p: Vec<f64>| {
            let mut trace = UncertaintyTrace::new();
            trace.observe(&dist(&p), &cfg).unwrap().m
        };
        let a = m_of(concentrated);
        let b = m_of(spread);
        assert!((a - b).abs() > 0.0, "{a} vs {b}");
    }

    fn arb_dist() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 2..40).prop_filter_map("all zero", |raw| {
            let s: f64 = raw.iter().sum();
            (s > 1e-6).then(|| raw.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn entropy_bounded(p in arb_dist()) {
            let d = TokenDistribution::new(p.clone()).unwrap();
            let h = entropy(&d);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-9);
        }

        #[test]
        fn entropy_and_confidence_permutation_invariant(p in arb_dist(), shift in 0usize..40) {
            let mut rotated = p.clone();
            let k = shift % p.len();
            rotated.rotate_left(k);
            let cfg = cfg_j(p.len().min(5));
            let (a, b) = (TokenDistribution::new(p).unwrap(), TokenDistribution::new(rotated).unwrap());
            prop_assert!((entropy(&a) - entropy(&b)).abs() < 1e-12);
            prop_assert!((top_j_confidence(&a, &cfg).unwrap() - top_j_confidence(&b, &cfg).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn window_bounded_by_max_delta(m in prop::collection::vec(0.0f64..1.0, 3..60), n in 0usize..5) {
            prop_assume!(m.len() > n + 1);
            let t = m.len() - 1;
            let w = window_mean_delta(&m, t, n).unwrap();
            let max_delta = m.windows(2).map(|p| (p[1] - p[0]).abs()).fold(0.0, f64::max);
            prop_assert!(w >= 0.0 && w <= max_delta + 1e-15);
        }

        #[test]
        fn trace_invariants(raw in prop::collection::vec((0.0f64..4.0, 0.0f64..20.0), 1..80), alpha in 0.0f64..=1.0) {
            let cfg = SignalConfig { alpha, ..SignalConfig::default() };
            let mut trace = UncertaintyTrace::new();
            let mut prev: Option<(f64, f64)> = None;
            for (i, &(h, c)) in raw.iter().enumerate() {
                let s = trace.append_and_normalize(h, c, &cfg).unwrap();
                for x in [s.h_norm, s.c_norm, s.m] {
                    prop_assert!((0.0..=1.0).contains(&x));
                }
                prop_assert!((s.m - (alpha * s.h_norm + (1.0 - alpha) * (1.0 - s.c_norm))).abs() < 1e-12);
                let seen = &raw[..=i];
                let h_min = seen.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
                let h_max = seen.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(trace.h_min(), Some(h_min));
                prop_assert_eq!(trace.h_max(), Some(h_max));
                if let Some((pmin, pmax)) = prev {
                    prop_assert!(h_min <= pmin && h_max >= pmax);
                }
                prev = Some((h_min, h_max));
            }
        }

        #[test]
        fn monotone_direction_under_fixed_bounds(
            h1 in 0.0f64..4.0, dh in 1e-3f64..0.1, c in 0.0f64..20.0, dc in 1e-3f64..1.0, alpha in 0.05f64..0.95
        ) {
            let cfg = SignalConfig { alpha, ..SignalConfig::default() }.with_fixed_bounds(64);
            let m = |h: f64, c: f64| UncertaintyTrace::new().append_and_normalize(h, c, &cfg).unwrap().m;
            prop_assert!(m(h1 + dh, c) > m(h1, c));
            prop_assert!(m(1.0, c + dc) < m(1.0, c));
        }
    }
}
