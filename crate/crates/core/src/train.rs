//! Training driver: warm start, optional rejective fine-tuning, then
//! iterations of collect, decompose, assign credit and update.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::demo::{demonstrations, warm_start};
use crate::derive_seed;
use crate::env::AnyEnv;
use crate::optimizer::{
    discounted_returns, episode_advantages, fuse_advantage, policy_gradient_step, turn_advantage, AnchorSample,
    OptimError, PgSample,
};
use crate::policy::{rft_update, PolicyError, PolicyParams, RftExample, SamplerConfig};
use crate::rollout::{
    rft_filter, staleness_for, write_logs, Collector, KHatTracker, RolloutError, RolloutGroup, Trajectory,
};

const TASK_STREAM: u64 = 1;
const ROLLOUT_STREAM: u64 = 2;
const DEMO_STREAM: u64 = 3;
const RFT_STREAM: u64 = 4;
const EVAL_STREAM: u64 = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("RFT dataset is empty at threshold {threshold}; lower rft.threshold or raise rft.tasks")]
    EmptyRftDataset { threshold: f64 },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Aggregate statistics of a set of trajectories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episodes: usize,
    pub successes: usize,
    pub mean_score: f64,
    pub mean_turns: f64,
    pub mean_tokens: f64,
    pub tokens_per_success: Option<f64>,
    pub turns_per_success: Option<f64>,
    pub turns: usize,
    pub strict_valid_rate: f64,
    pub void_rate: f64,
    /// Accepted turns whose thinking hit the budget.
    pub truncation_fraction: f64,
    /// Accepted turns stopped by the window rule.
    pub tti_trigger_rate: f64,
    /// Rejected generations over all generations.
    pub tds_regen_rate: f64,
}

impl EpisodeStats {
    pub fn success_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }

    pub fn from_trajectories<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let mut s = EpisodeStats::default();
        let (mut score, mut turns_total, mut tokens_total) = (0.0, 0usize, 0usize);
        let (mut succ_tokens, mut succ_turns) = (0usize, 0usize);
        let (mut strict, mut void, mut budget, mut window, mut rejected) = (0, 0, 0, 0, 0);
        for t in trajs {
            s.episodes += 1;
            score += t.task_score;
            turns_total += t.turns.len();
            tokens_total += t.tokens_generated();
            if t.success() {
                s.successes += 1;
                succ_tokens += t.tokens_generated();
                succ_turns += t.turns.len();
            }
            for turn in &t.turns {
                let c = &turn.candidate;
                strict += usize::from(c.action.strict_valid);
                void += usize::from(c.action.is_void());
                budget += usize::from(c.budget_hit());
                window += usize::from(c.window_trigger());
                rejected += turn.rejected.len();
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        s.turns = turns_total;
        s.mean_score = if s.episodes == 0 { 0.0 } else { score / s.episodes as f64 };
        s.mean_turns = ratio(turns_total, s.episodes);
        s.mean_tokens = ratio(tokens_total, s.episodes);
        s.tokens_per_success = (s.successes > 0).then(|| ratio(succ_tokens, s.successes));
        s.turns_per_success = (s.successes > 0).then(|| ratio(succ_turns, s.successes));
        s.strict_valid_rate = ratio(strict, turns_total);
        s.void_rate = ratio(void, turns_total);
        s.truncation_fraction = ratio(budget, turns_total);
        s.tti_trigger_rate = ratio(window, turns_total);
        s.tds_regen_rate = ratio(rejected, turns_total + rejected);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub stats: EpisodeStats,
    pub objective: Option<f64>,
    pub mean_kl: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub samples: usize,
    pub k_hat: f64,
    pub rho_stale: f64,
}

pub const METRICS_HEADER: &str = "iteration,episodes,success_rate,mean_score,mean_turns,mean_tokens,\
tokens_per_success,turns_per_success,strict_valid_rate,void_rate,truncation_fraction,tti_trigger_rate,\
tds_regen_rate,objective,mean_kl,clip_fraction,samples,k_hat,rho_stale";

/// Explicit marker for undefined values in delimited outputs.
pub const NULL: &str = "null";

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| NULL.to_string(), |v| v.to_string())
}

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        let s = &self.stats;
        [
            self.iteration.to_string(),
            s.episodes.to_string(),
            s.success_rate().to_string(),
            s.mean_score.to_string(),
            s.mean_turns.to_string(),
            s.mean_tokens.to_string(),
            fmt_opt(s.tokens_per_success),
            fmt_opt(s.turns_per_success),
            s.strict_valid_rate.to_string(),
            s.void_rate.to_string(),
            s.truncation_fraction.to_string(),
            s.tti_trigger_rate.to_string(),
            s.tds_regen_rate.to_string(),
            fmt_opt(self.objective),
            fmt_opt(self.mean_kl),
            fmt_opt(self.clip_fraction),
            self.samples.to_string(),
            self.k_hat.to_string(),
            self.rho_stale.to_string(),
        ]
        .join(",")
    }
}

pub fn collector(cfg: &RunConfig) -> Collector {
    Collector::new(cfg.decode_config(), cfg.orchestrator, cfg.env.format_penalty, cfg.run.exec)
}

fn tasks(cfg: &RunConfig, stream: u64, iteration: usize, count: usize) -> Vec<AnyEnv> {
    (0..count)
        .map(|b| {
            let seed = derive_seed(cfg.run.seed, &[stream, iteration as u64, b as u64]);
            cfg.env
                .make_task(format!("i{iteration}-t{b}"), seed, cfg.orchestrator.max_turns)
        })
        .collect()
}

/// Base policy: zeros, fitted to scripted demonstrations when enabled.
pub fn initial_policy(cfg: &RunConfig) -> PolicyParams {
    let params = PolicyParams::zeros(cfg.policy.state_dim);
    if !cfg.warm_start.enabled {
        return params;
    }
    let seed = derive_seed(cfg.run.seed, &[DEMO_STREAM]);
    let data = demonstrations(&cfg.env, &cfg.warm_start.demo, cfg.policy.state_dim, seed);
    warm_start(params, &data, &cfg.warm_start, seed, cfg.run.exec)
}

/// Policy-gradient samples for one rollout group. Void turns are left out.
pub fn group_samples(group: &RolloutGroup, cfg: &RunConfig) -> Vec<PgSample> {
    let opt = &cfg.optimizer;
    let returns: Vec<Vec<f64>> = group
        .trajectories
        .iter()
        .map(|t| discounted_returns(&t.rewards(), opt.discount).per_turn_returns)
        .collect();
    let episode = episode_advantages(&returns, opt.f_norm);
    let anchors: Vec<AnchorSample> = group
        .trajectories
        .iter()
        .zip(&returns)
        .flat_map(|(t, r)| {
            t.turns.iter().zip(r).map(|(turn, &ret)| AnchorSample {
                state_key: &turn.state_key,
                action: turn.candidate.action.executable(),
                discounted_return: ret,
            })
        })
        .collect();
    let turn_adv = turn_advantage(&anchors, opt.f_norm);

    let mut out = Vec::new();
    let mut flat = 0;
    for (i, t) in group.trajectories.iter().enumerate() {
        for (k, turn) in t.turns.iter().enumerate() {
            let adv = fuse_advantage(episode[i][k], turn_adv[flat], opt.omega);
            flat += 1;
            if turn.candidate.action.is_void() {
                continue;
            }
            out.push(PgSample {
                features: turn.features.clone(),
                tokens: turn.candidate.tokens.clone(),
                include: turn.candidate.include_mask(),
                old_log_prob: turn.candidate.old_log_prob,
                advantage: adv,
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<IterationMetrics>,
}

/// RL iterations starting from `init`, which also serves as the KL reference.
/// Trajectory logs are appended to `log` when given.
pub fn train(cfg: &RunConfig, init: PolicyParams, mut log: Option<&mut dyn Write>) -> Result<TrainOutcome, TrainError> {
    let collector = collector(cfg);
    let reference = init.clone();
    let mut params = init;
    let mut k_hat = KHatTracker::default();
    let mut metrics = Vec::with_capacity(cfg.run.iterations);
    let rb = cfg.orchestrator.rollout_batch;

    for it in 0..cfg.run.iterations {
        let batch_tasks = tasks(cfg, TASK_STREAM, it, rb);
        let seed = derive_seed(cfg.run.seed, &[ROLLOUT_STREAM, it as u64]);
        let groups = collector.collect_batch(&batch_tasks, &params, seed, it * rb)?;
        if let Some(w) = log.as_deref_mut() {
            write_logs(w, &cfg.run.run_id, it, &groups)?;
        }
        let trajs: Vec<&Trajectory> = groups.iter().flat_map(|g| g.trajectories.iter()).collect();
        for t in &trajs {
            k_hat.push(t.turns.len());
        }
        let stats = EpisodeStats::from_trajectories(trajs.iter().copied());

        let mut samples: Vec<PgSample> = groups.iter().flat_map(|g| group_samples(g, cfg)).collect();
        samples.truncate(cfg.orchestrator.target_samples);
        let (mut obj, mut kl, mut clip) = (Vec::new(), Vec::new(), Vec::new());
        for batch in samples.chunks(cfg.orchestrator.update_batch) {
            let (next, st) = policy_gradient_step(&params, Some(&reference), batch, &cfg.optimizer, cfg.run.lr, cfg.run.exec)?;
            params = next;
            obj.push(st.objective);
            kl.push(st.mean_kl);
            clip.push(st.clip_fraction);
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let stale = staleness_for(&cfg.orchestrator, k_hat.value());
        let row = IterationMetrics {
            iteration: it,
            stats,
            objective: mean(&obj),
            mean_kl: mean(&kl),
            clip_fraction: mean(&clip),
            samples: samples.len(),
            k_hat: stale.k_hat,
            rho_stale: stale.rho_stale,
        };
        log::info!(
            "iter {it}: success {:.3} turns {:.2} tokens {:.1}",
            row.stats.success_rate(),
            row.stats.mean_turns,
            row.stats.mean_tokens
        );
        metrics.push(row);
    }
    Ok(TrainOutcome { params, metrics })
}

pub fn write_metrics(path: &Path, metrics: &[IterationMetrics]) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(w, "{METRICS_HEADER}").map_err(io_err(path))?;
    for m in metrics {
        writeln!(w, "{}", m.csv_row()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn save_policy(path: &Path, params: &PolicyParams) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    params.write_checkpoint(&mut w)?;
    w.flush().map_err(io_err(path))
}

pub fn load_policy(path: &Path) -> Result<PolicyParams, TrainError> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(PolicyParams::read_checkpoint(std::io::BufReader::new(f))?)
}

/// Collect `episodes` trajectories on held-out tasks with `sampler`.
pub fn evaluate(
    cfg: &RunConfig,
    params: &PolicyParams,
    episodes: usize,
    sampler: SamplerConfig,
) -> Result<Vec<Trajectory>, TrainError> {
    let mut c = collector(cfg);
    c.decode.sampler = sampler;
    let g = cfg.orchestrator.group_size;
    let n_tasks = episodes.div_ceil(g);
    let eval_tasks = tasks(cfg, EVAL_STREAM, 0, n_tasks);
    let seed = derive_seed(cfg.run.seed, &[EVAL_STREAM]);
    let groups = c.collect_batch(&eval_tasks, params, seed, 0)?;
    Ok(groups
        .into_iter()
        .flat_map(|g| g.trajectories)
        .take(episodes)
        .collect())
}

/// One evaluation episode on held-out task `task_index`, for inspection.
pub fn debug_episode(cfg: &RunConfig, params: &PolicyParams, task_index: usize) -> Result<Trajectory, TrainError> {
    let env = tasks(cfg, EVAL_STREAM, 0, task_index + 1).swap_remove(task_index);
    let seed = derive_seed(cfg.run.seed, &[EVAL_STREAM, task_index as u64]);
    Ok(collector(cfg).collect_trajectory(&env, params, 0, 0, seed)?)
}

#[derive(Debug, Clone)]
pub struct RftOutcome {
    pub params: PolicyParams,
    pub dataset: Vec<RftExample>,
    /// `(threshold, dataset size)` for the configured sweep.
    pub sweep: Vec<(f64, usize)>,
    /// Mean sequence NLL on the dataset after each epoch.
    pub epoch_nll: Vec<f64>,
}

/// Roll out `base`, keep high-scoring trajectories and fine-tune on them.
pub fn run_rft(cfg: &RunConfig, base: &PolicyParams) -> Result<RftOutcome, TrainError> {
    let collector = collector(cfg);
    let rft_tasks = tasks(cfg, RFT_STREAM, 0, cfg.rft.tasks);
    let groups = collector.collect_batch(&rft_tasks, base, derive_seed(cfg.run.seed, &[RFT_STREAM]), 0)?;
    let trajs: Vec<&Trajectory> = groups.iter().flat_map(|g| g.trajectories.iter()).collect();
    let sweep = cfg
        .rft
        .sweep
        .iter()
        .map(|&th| (th, rft_filter(trajs.iter().copied(), th).len()))
        .collect();
    let dataset = rft_filter(trajs.iter().copied(), cfg.rft.threshold);
    if dataset.is_empty() && cfg.rft.epochs > 0 {
        return Err(TrainError::EmptyRftDataset {
            threshold: cfg.rft.threshold,
        });
    }
    let mut params = base.clone();
    let mut epoch_nll = Vec::new();
    for _ in 0..cfg.rft.epochs {
        for batch in dataset.chunks(cfg.rft.batch) {
            params = rft_update(&params, batch, cfg.rft.lr)?;
        }
        epoch_nll.push(crate::policy::mean_nll(&params, &dataset));
    }
    Ok(RftOutcome {
        params,
        dataset,
        sweep,
        epoch_nll,
    })
}

/// Everything `train` writes to `out_dir`.
pub struct TrainArtifacts {
    pub outcome: TrainOutcome,
    pub rft: Option<RftOutcome>,
}

/// Full run: base policy, optional RFT, RL; writes `metrics.csv`,
/// `trajectories.jsonl`, `policy.bin` and `config.toml` under `run.out_dir`.
pub fn train_to_dir(cfg: &RunConfig, base: Option<PolicyParams>) -> Result<TrainArtifacts, TrainError> {
    let dir = cfg.run.out_dir.as_path();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()).map_err(io_err(&config_path))?;
    let mut init = base.unwrap_or_else(|| initial_policy(cfg));
    let rft = if cfg.run.rft_first {
        let out = run_rft(cfg, &init)?;
        init = out.params.clone();
        Some(out)
    } else {
        None
    };
    let log_path = dir.join("trajectories.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let outcome = train(cfg, init, Some(&mut log))?;
    log.flush().map_err(io_err(&log_path))?;
    write_metrics(&dir.join("metrics.csv"), &outcome.metrics)?;
    save_policy(&dir.join("policy.bin"), &outcome.params)?;
    Ok(TrainArtifacts { outcome, rft })
}
