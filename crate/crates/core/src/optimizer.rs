//! Credit assignment and the clipped policy update.
//!
//! Returns are discounted per turn. Each turn's return is compared against
//! the other trajectories of its rollout group at the same turn index
//! (episode-level advantage) and against every sample of the group that
//! acted from the same environment state (anchor-state advantage). The two
//! are summed with weight `omega` and fed to a sequence-level clipped
//! surrogate with a KL penalty to a frozen reference policy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, ExecMode};
use crate::policy::{check_finite, sequence_stats, PolicyError, PolicyParams, StateFeatures};
use crate::vocab::TokenId;

/// Added to the group standard deviation under [`FNorm::StdNorm`].
pub const STD_EPS: f64 = 1e-8;

const GRAD_CHUNK: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("group of size {0} has no relative signal (need >= 2)")]
    GroupTooSmall(usize),
    #[error("invalid credit config: {0}")]
    Config(String),
    #[error("non-finite gradient at feature {feature}, token {token}")]
    NonFiniteGradient { feature: usize, token: usize },
    #[error("ratio and advantage lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FNorm {
    /// Subtract the group mean.
    #[default]
    MeanNorm,
    /// Subtract the mean and divide by the population std plus [`STD_EPS`].
    StdNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CreditConfig {
    pub discount: f64,
    pub omega: f64,
    pub f_norm: FNorm,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub group_size: usize,
    /// Global gradient-norm cap; `0` disables it.
    pub max_grad_norm: f64,
}

impl Default for CreditConfig {
    fn default() -> Self {
        Self {
            discount: 0.95,
            omega: 1.0,
            f_norm: FNorm::MeanNorm,
            clip_eps: 0.2,
            kl_coeff: 0.01,
            group_size: 8,
            max_grad_norm: 0.0,
        }
    }
}

impl CreditConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let err = |m: String| Err(OptimError::Config(m));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return err(format!("discount = {} not in (0, 1)", self.discount));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return err(format!("omega = {} must be >= 0", self.omega));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return err(format!("clip_eps = {} not in (0, 1)", self.clip_eps));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return err(format!("kl_coeff = {} must be >= 0", self.kl_coeff));
        }
        if self.group_size < 2 {
            return err(format!("group_size = {} must be >= 2", self.group_size));
        }
        if !(self.max_grad_norm >= 0.0) {
            return err(format!("max_grad_norm = {} must be >= 0", self.max_grad_norm));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnRecord {
    pub per_turn_returns: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub episode_adv: f64,
    pub turn_adv: f64,
    pub fused: f64,
}

impl AdvantageRecord {
    pub fn new(episode_adv: f64, turn_adv: f64, omega: f64) -> Self {
        Self {
            episode_adv,
            turn_adv,
            fused: fuse_advantage(episode_adv, turn_adv, omega),
        }
    }
}

/// `R_k = r_k + discount * R_{k+1}`.
pub fn discounted_returns(rewards: &[f64], discount: f64) -> ReturnRecord {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (k, r) in rewards.iter().enumerate().rev() {
        acc = r + discount * acc;
        out[k] = acc;
    }
    ReturnRecord {
        per_turn_returns: out,
    }
}

pub fn group_advantage(returns: &[f64], f_norm: FNorm) -> Result<Vec<f64>, OptimError> {
    let n = returns.len();
    if n < 2 {
        return Err(OptimError::GroupTooSmall(n));
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let centered = returns.iter().map(|r| r - mean);
    Ok(match f_norm {
        FNorm::MeanNorm => centered.collect(),
        FNorm::StdNorm => {
            let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if std < STD_EPS {
                vec![0.0; n]
            } else {
                centered.map(|c| c / (std + STD_EPS)).collect()
            }
        }
    })
}

/// One turn sample as seen by anchor-state grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSample<'a> {
    pub state_key: &'a str,
    pub action: &'a str,
    pub discounted_return: f64,
}

/// Group samples by exact `state_key` and compare returns inside each
/// group. Singleton groups get 0. Output is aligned with the input.
pub fn turn_advantage(samples: &[AnchorSample<'_>], f_norm: FNorm) -> Vec<f64> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.state_key).or_default().push(i);
    }
    let mut out = vec![0.0; samples.len()];
    for idx in groups.values().filter(|idx| idx.len() >= 2) {
        let returns: Vec<f64> = idx.iter().map(|&i| samples[i].discounted_return).collect();
        let adv = group_advantage(&returns, f_norm).expect("group has >= 2 members");
        for (&i, a) in idx.iter().zip(adv) {
            out[i] = a;
        }
    }
    out
}

/// Episode-level advantage for each turn of each trajectory in a group: the
/// return at turn `k` is compared against the returns at turn `k` of every
/// trajectory that reached it. A turn reached by a single trajectory gets 0.
pub fn episode_advantages(group_returns: &[Vec<f64>], f_norm: FNorm) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = group_returns.iter().map(|r| vec![0.0; r.len()]).collect();
    let k_max = group_returns.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..k_max {
        let members: Vec<usize> = (0..group_returns.len())
            .filter(|&i| group_returns[i].len() > k)
            .collect();
        if members.len() < 2 {
            continue;
        }
        let returns: Vec<f64> = members.iter().map(|&i| group_returns[i][k]).collect();
        let adv = group_advantage(&returns, f_norm).expect("at least two members");
        for (&i, a) in members.iter().zip(adv) {
            out[i][k] = a;
        }
    }
    out
}

pub fn fuse_advantage(episode_adv: f64, turn_adv: f64, omega: f64) -> f64 {
    episode_adv + omega * turn_adv
}

fn clip(x: f64, eps: f64) -> f64 {
    x.clamp(1.0 - eps, 1.0 + eps)
}

/// Whether `min(rho * a, clip(rho) * a)` takes the unclipped branch.
fn unclipped_branch(rho: f64, adv: f64, eps: f64) -> bool {
    rho * adv <= clip(rho, eps) * adv
}

pub fn surrogate(rho: f64, adv: f64, eps: f64) -> f64 {
    (rho * adv).min(clip(rho, eps) * adv)
}

/// Mean clipped surrogate minus `kl_coeff * mean_kl` (to be maximized).
pub fn clipped_objective(
    ratios: &[f64],
    advantages: &[f64],
    clip_eps: f64,
    mean_kl: f64,
    kl_coeff: f64,
) -> Result<f64, OptimError> {
    if ratios.len() != advantages.len() {
        return Err(OptimError::LengthMismatch(ratios.len(), advantages.len()));
    }
    if ratios.is_empty() {
        return Ok(-kl_coeff * mean_kl);
    }
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| surrogate(r, a, clip_eps))
        .sum();
    Ok(total / ratios.len() as f64 - kl_coeff * mean_kl)
}

/// One optimization sample: a turn's state, its action tokens and the
/// quantities recorded at rollout time.
#[derive(Debug, Clone, PartialEq)]
pub struct PgSample {
    pub features: StateFeatures,
    pub tokens: Vec<TokenId>,
    /// Positions that count towards the log-probability (forced tokens excluded).
    pub include: Vec<bool>,
    pub old_log_prob: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub objective: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub samples: usize,
}

struct SampleEval {
    rho: f64,
    kl_sum: f64,
    positions: usize,
}

fn evaluate(params: &PolicyParams, reference: Option<&PolicyParams>, batch: &[PgSample], mode: ExecMode) -> Vec<SampleEval> {
    par::map(mode, batch, |s| {
        let st = sequence_stats(params, reference, &s.features, &s.tokens, &s.include, None);
        SampleEval {
            rho: (st.log_prob - s.old_log_prob).exp(),
            kl_sum: st.kl_sum,
            positions: st.positions,
        }
    })
}

/// Objective value and its analytic gradient with respect to the weights.
pub fn objective_and_gradient(
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    batch: &[PgSample],
    cfg: &CreditConfig,
    mode: ExecMode,
) -> (StepStats, Vec<f64>) {
    let n_weights = params.weights().len();
    if batch.is_empty() {
        return (StepStats::default(), vec![0.0; n_weights]);
    }
    let evals = evaluate(params, reference, batch, mode);
    let total_positions: usize = evals.iter().map(|e| e.positions).sum();
    let kl_total: f64 = evals.iter().map(|e| e.kl_sum).sum();
    let mean_kl = if total_positions > 0 { kl_total / total_positions as f64 } else { 0.0 };
    let ratios: Vec<f64> = evals.iter().map(|e| e.rho).collect();
    let advs: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
    let objective = clipped_objective(&ratios, &advs, cfg.clip_eps, mean_kl, cfg.kl_coeff)
        .expect("aligned lengths");
    let n = batch.len() as f64;
    let kl_scale = if total_positions > 0 && reference.is_some() {
        -cfg.kl_coeff / total_positions as f64
    } else {
        0.0
    };
    let clipped = evals
        .iter()
        .zip(batch)
        .filter(|(e, s)| !unclipped_branch(e.rho, s.advantage, cfg.clip_eps))
        .count();

    let indexed: Vec<(usize, &PgSample)> = batch.iter().enumerate().collect();
    let grad = par::chunked_sum(mode, &indexed, GRAD_CHUNK, n_weights, |chunk, acc| {
        for &(i, s) in chunk {
            let rho = evals[i].rho;
            let lp_scale = if unclipped_branch(rho, s.advantage, cfg.clip_eps) {
                s.advantage * rho / n
            } else {
                0.0
            };
            if lp_scale == 0.0 && kl_scale == 0.0 {
                continue;
            }
            sequence_stats(params, reference, &s.features, &s.tokens, &s.include, Some((acc, lp_scale, kl_scale)));
        }
    });
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    (
        StepStats {
            objective,
            mean_kl,
            clip_fraction: clipped as f64 / n,
            grad_norm,
            samples: batch.len(),
        },
        grad,
    )
}

/// Objective value only.
pub fn objective_value(
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    batch: &[PgSample],
    cfg: &CreditConfig,
) -> f64 {
    let evals = evaluate(params, reference, batch, ExecMode::Sequential);
    let positions: usize = evals.iter().map(|e| e.positions).sum();
    let mean_kl = if positions > 0 && reference.is_some() {
        evals.iter().map(|e| e.kl_sum).sum::<f64>() / positions as f64
    } else {
        0.0
    };
    let ratios: Vec<f64> = evals.iter().map(|e| e.rho).collect();
    let advs: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
    clipped_objective(&ratios, &advs, cfg.clip_eps, mean_kl, cfg.kl_coeff).expect("aligned lengths")
}

/// Gradient ascent on the clipped-KL objective.
pub fn policy_gradient_step(
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    batch: &[PgSample],
    cfg: &CreditConfig,
    lr: f64,
    mode: ExecMode,
) -> Result<(PolicyParams, StepStats), OptimError> {
    let (stats, mut grad) = objective_and_gradient(params, reference, batch, cfg, mode);
    check_finite(&grad, params.vocab()).map_err(|e| match e {
        PolicyError::NonFiniteGradient { feature, token } => OptimError::NonFiniteGradient { feature, token },
        other => OptimError::Config(other.to_string()),
    })?;
    if cfg.max_grad_norm > 0.0 && stats.grad_norm > cfg.max_grad_norm {
        let s = cfg.max_grad_norm / stats.grad_norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    let mut next = params.clone();
    next.scale_add(&grad, lr);
    Ok((next, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn returns_examples() {
        let r = discounted_returns(&[0.0, 0.0, 1.0], 0.9).per_turn_returns;
        assert!(close(&r, &[0.81, 0.9, 1.0], 1e-12));
        assert_eq!(discounted_returns(&[0.0; 4], 0.9).per_turn_returns, vec![0.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = rng.random_range(1..12);
            let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = discounted_returns(&rewards, 0.95).per_turn_returns;
            for k in 0..n {
                let slow: f64 = (k..n).map(|j| 0.95f64.powi((j - k) as i32) * rewards[j]).sum();
                assert!((fast[k] - slow).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_advantage_examples() {
        let a = group_advantage(&[1.0, 0.0, 0.0, 1.0], FNorm::MeanNorm).unwrap();
        assert!(close(&a, &[0.5, -0.5, -0.5, 0.5], 1e-15));
        for mode in [FNorm::MeanNorm, FNorm::StdNorm] {
            assert_eq!(group_advantage(&[0.3; 5], mode).unwrap(), vec![0.0; 5]);
        }
        let a = group_advantage(&[2.0, 0.0], FNorm::StdNorm).unwrap();
        assert!(close(&a, &[1.0, -1.0], 1e-6));
        assert_eq!(group_advantage(&[1.0], FNorm::MeanNorm), Err(OptimError::GroupTooSmall(1)));
    }

    #[test]
    fn turn_advantage_examples() {
        let s = |k: &'static str, r| AnchorSample {
            state_key: k,
            action: "a",
            discounted_return: r,
        };
        let a = turn_advantage(&[s("x", 1.0), s("x", 0.0)], FNorm::MeanNorm);
        assert!(close(&a, &[0.5, -0.5], 1e-15));
        let a = turn_advantage(&[s("x", 1.0), s("y", 0.0), s("z", 3.0)], FNorm::MeanNorm);
        assert_eq!(a, vec![0.0; 3]);
    }

    #[test]
    fn episode_advantage_by_turn_index() {
        let adv = episode_advantages(&[vec![1.0, 2.0], vec![0.0], vec![2.0, 0.0, 5.0]], FNorm::MeanNorm);
        assert!(close(&adv[0], &[0.0, 1.0], 1e-15));
        assert!(close(&adv[1], &[-1.0], 1e-15));
        assert!(close(&adv[2], &[1.0, -1.0, 0.0], 1e-15));
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse_advantage(0.7, 0.3, 0.0), 0.7);
        assert!((fuse_advantage(0.5, -0.2, 1.0) - 0.3).abs() < 1e-15);
        assert_eq!(fuse_advantage(0.0, 0.25, 2.0), 0.5);
        let rec = AdvantageRecord::new(0.1, 0.2, 1.5);
        assert!((rec.fused - (rec.episode_adv + 1.5 * rec.turn_adv)).abs() < 1e-12);
    }

    #[test]
    fn clipped_objective_examples() {
        let v = clipped_objective(&[1.0, 1.0], &[0.5, -0.1], 0.2, 0.3, 0.01).unwrap();
        assert!((v - (0.2 - 0.003)).abs() < 1e-15);
        assert!((clipped_objective(&[2.0], &[1.0], 0.2, 0.0, 0.0).unwrap() - 1.2).abs() < 1e-15);
        assert!((clipped_objective(&[0.5], &[-1.0], 0.2, 0.0, 0.0).unwrap() + 0.8).abs() < 1e-15);
    }

    fn random_batch(rng: &mut ChaCha8Rng, params: &PolicyParams, n: usize, perturb: f64) -> Vec<PgSample> {
        (0..n)
            .map(|i| {
                let facts = [format!("f{}", rng.random_range(0..20)), format!("g{i}")];
                let features = StateFeatures::from_facts(&facts, params.state_dim());
                let len = rng.random_range(1..8);
                let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..64)).collect();
                let include: Vec<bool> = (0..len).map(|t| t == 0 || rng.random_bool(0.8)).collect();
                let lp = crate::policy::sequence_log_prob_masked(params, &features, &tokens, &include);
                PgSample {
                    features,
                    tokens,
                    include,
                    old_log_prob: lp + rng.random_range(-perturb..perturb),
                    advantage: rng.random_range(-1.0..1.0),
                }
            })
            .collect()
    }

    #[test]
    fn lr_zero_and_zero_advantage() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PolicyParams::random(8, 0.2, &mut rng);
        let mut batch = random_batch(&mut rng, &p, 6, 0.1);
        let cfg = CreditConfig::default();
        let (next, _) = policy_gradient_step(&p, Some(&p), &batch, &cfg, 0.0, ExecMode::Sequential).unwrap();
        assert_eq!(next, p);
        batch.iter_mut().for_each(|s| s.advantage = 0.0);
        let cfg = CreditConfig {
            kl_coeff: 0.0,
            ..cfg
        };
        let (_, grad) = objective_and_gradient(&p, Some(&p), &batch, &cfg, ExecMode::Sequential);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PolicyParams::random(8, 0.3, &mut rng);
        let reference = PolicyParams::random(8, 0.3, &mut rng);
        let batch = random_batch(&mut rng, &p, 10, 0.4);
        let cfg = CreditConfig {
            kl_coeff: 0.5,
            ..CreditConfig::default()
        };
        let (_, grad) = objective_and_gradient(&p, Some(&reference), &batch, &cfg, ExecMode::Parallel);
        let h = 1e-5;
        let mut checked = 0;
        for _ in 0..60 {
            let i = rng.random_range(0..p.weights().len());
            let mut plus = p.clone();
            plus.weights_mut()[i] += h;
            let mut minus = p.clone();
            minus.weights_mut()[i] -= h;
            let fd = (objective_value(&plus, Some(&reference), &batch, &cfg)
                - objective_value(&minus, Some(&reference), &batch, &cfg))
                / (2.0 * h);
            let scale = grad[i].abs().max(fd.abs());
            if scale < 1e-7 {
                assert!((grad[i] - fd).abs() < 1e-9);
                continue;
            }
            assert!((grad[i] - fd).abs() / scale < 1e-4, "index {i}: {} vs {fd}", grad[i]);
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn parallel_and_sequential_gradients_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = PolicyParams::random(8, 0.3, &mut rng);
        let batch = random_batch(&mut rng, &p, 40, 0.3);
        let cfg = CreditConfig::default();
        let a = objective_and_gradient(&p, Some(&p), &batch, &cfg, ExecMode::Parallel);
        let b = objective_and_gradient(&p, Some(&p), &batch, &cfg, ExecMode::Sequential);
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
    }

    proptest! {
        #[test]
        fn mean_norm_sums_to_zero_and_shift_invariant(
            r in prop::collection::vec(-10.0f64..10.0, 2..20),
            c in -5.0f64..5.0,
        ) {
            let a = group_advantage(&r, FNorm::MeanNorm).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
            let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
            let b = group_advantage(&shifted, FNorm::MeanNorm).unwrap();
            prop_assert!(close(&a, &b, 1e-9));
        }

        #[test]
        fn std_norm_scale_invariant(r in prop::collection::vec(-10.0f64..10.0, 2..20), s in 0.1f64..10.0) {
            let a = group_advantage(&r, FNorm::StdNorm).unwrap();
            let scaled: Vec<f64> = r.iter().map(|x| x * s).collect();
            let b = group_advantage(&scaled, FNorm::StdNorm).unwrap();
            let spread = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - r.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            prop_assert!(close(&a, &b, 1e-6));
        }

        #[test]
        fn clipped_contribution_bounded(rho in 0.01f64..5.0, adv in -3.0f64..3.0, eps in 0.05f64..0.5) {
            let v = surrogate(rho, adv, eps);
            prop_assert!(v <= (1.0 + eps) * adv.abs() + 1e-12);
            if adv >= 0.0 || rho <= 1.0 + eps {
                prop_assert!(v.abs() <= (1.0 + eps) * adv.abs() + 1e-12);
            } else {
                prop_assert_eq!(v, rho * adv);
            }
        }

        #[test]
        fn turn_advantage_permutation_invariant(
            rs in prop::collection::vec((0usize..3, -1.0f64..1.0), 2..12),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            let keys = ["a", "b", "c"];
            let samples: Vec<AnchorSample> = rs.iter().map(|&(k, r)| AnchorSample { state_key: keys[k], action: "x", discounted_return: r }).collect();
            let base = turn_advantage(&samples, FNorm::MeanNorm);
            let mut perm: Vec<usize> = (0..samples.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<AnchorSample> = perm.iter().map(|&i| samples[i].clone()).collect();
            let out = turn_advantage(&shuffled, FNorm::MeanNorm);
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((out[j] - base[i]).abs() < 1e-12);
            }
        }
    }
}
