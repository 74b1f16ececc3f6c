use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use turnwise::config::RunConfig;
use turnwise::policy::PolicyParams;
use turnwise::report::{build_report, read_logs, write_report};
use turnwise::rollout::Trajectory;
use turnwise::train::{
    debug_episode, evaluate, initial_policy, load_policy, run_rft, save_policy, train_to_dir, EpisodeStats,
};
use turnwise::vocab::Vocabulary;

#[derive(Parser)]
#[command(name = "turnwise", version, about = "Uncertainty-guided exploration control for multi-turn RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn enabled(self) -> bool {
        matches!(self, Switch::On)
    }
}

/// Options shared by every subcommand that builds a run configuration.
/// Precedence is file, then `T2PO_*` variables, then these flags.
#[derive(Args)]
struct RunArgs {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Token-level thinking intervention.
    #[arg(long, value_enum)]
    tti: Option<Switch>,
    /// Turn-level dynamical sampling.
    #[arg(long, value_enum)]
    tds: Option<Switch>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Optional RFT, then RL iterations; writes logs, metrics and a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Start from this checkpoint instead of the warm-started base policy.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Rejective fine-tuning on the base policy's own high-scoring rollouts.
    Rft {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Efficiency report from trajectory logs.
    Analyze {
        /// Trajectory log of the controlled run.
        logs: PathBuf,
        /// Trajectory log of a seed-matched baseline run.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Width of the tokens-per-success histogram bins.
        #[arg(long, default_value_t = 50)]
        bin_width: usize,
    },
    /// One episode with a per-token signal dump (stdout unless --out is set).
    Rollout {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Index of the held-out task.
        #[arg(long, default_value_t = 0)]
        task: usize,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

trait OrRuntime<T> {
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrRuntime<T> for Result<T, E> {
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let loaded = match &args.config {
        Some(path) => RunConfig::load(path),
        None => RunConfig::from_toml_with_env("", std::env::vars()),
    };
    let mut cfg = loaded.map_err(|e| Failure::Config(e.into()))?;
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(n) = args.iterations {
        cfg.run.iterations = n;
    }
    if let Some(t) = args.tti {
        cfg.tti.enabled = t.enabled();
    }
    if let Some(t) = args.tds {
        cfg.tds.enabled = t.enabled();
    }
    if let Some(out) = &args.out {
        cfg.run.out_dir = out.clone();
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    Ok(cfg)
}

fn base_policy(cfg: &RunConfig, init: Option<&Path>) -> Result<PolicyParams, Failure> {
    let params = match init {
        Some(path) => load_policy(path).runtime()?,
        None => initial_policy(cfg),
    };
    if params.state_dim() != cfg.policy.state_dim {
        return Err(Failure::Config(anyhow::anyhow!(
            "policy.state_dim = {} but the checkpoint has {}",
            cfg.policy.state_dim,
            params.state_dim()
        )));
    }
    Ok(params)
}

fn cmd_train(run: &RunArgs, init: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(run)?;
    let base = base_policy(&cfg, init)?;
    let art = train_to_dir(&cfg, Some(base)).runtime()?;
    if let Some(last) = art.outcome.metrics.last() {
        println!(
            "{} iterations, final success rate {:.3}, outputs in {}",
            art.outcome.metrics.len(),
            last.stats.success_rate(),
            cfg.run.out_dir.display()
        );
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

fn eval_row(name: &str, trajs: &[Trajectory]) -> String {
    let st = EpisodeStats::from_trajectories(trajs);
    format!("{name},{},{},{}\n", st.episodes, st.strict_valid_rate, st.success_rate())
}

fn cmd_rft(run: &RunArgs, init: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(run)?;
    let base = base_policy(&cfg, init)?;
    let out = run_rft(&cfg, &base).runtime()?;
    let dir = &cfg.run.out_dir;
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime()?;

    let mut sweep = String::from("threshold,dataset_size\n");
    for (th, n) in &out.sweep {
        sweep.push_str(&format!("{th},{n}\n"));
    }
    write_text(&dir.join("rft_sweep.csv"), &sweep)?;

    let mut epochs = String::from("epoch,mean_nll\n");
    for (i, nll) in out.epoch_nll.iter().enumerate() {
        epochs.push_str(&format!("{},{nll}\n", i + 1));
    }
    write_text(&dir.join("rft_epochs.csv"), &epochs)?;

    let vocab = Vocabulary::get();
    let mut dataset = String::new();
    for ex in &out.dataset {
        let line = serde_json::json!({
            "history": ex.history,
            "tokens": ex.tokens,
            "text": vocab.render(&ex.tokens, &[]),
        });
        dataset.push_str(&line.to_string());
        dataset.push('\n');
    }
    write_text(&dir.join("rft_dataset.jsonl"), &dataset)?;

    save_policy(&dir.join("base_policy.bin"), &base).runtime()?;
    save_policy(&dir.join("policy.bin"), &out.params).runtime()?;

    let n = cfg.rft.eval_episodes;
    let before = evaluate(&cfg, &base, n, cfg.sampler).runtime()?;
    let after = evaluate(&cfg, &out.params, n, cfg.sampler).runtime()?;
    let table = format!(
        "policy,episodes,strict_valid_rate,success_rate\n{}{}",
        eval_row("base", &before),
        eval_row("rft", &after)
    );
    write_text(&dir.join("rft_eval.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_analyze(logs: &Path, baseline: Option<&Path>, out: &Path, bin_width: usize) -> Result<(), Failure> {
    let report = build_report(&read_logs(logs).runtime()?, bin_width);
    let base = match baseline {
        Some(p) => Some(build_report(&read_logs(p).runtime()?, bin_width)),
        None => None,
    };
    write_report(out, &report, base.as_ref()).runtime()?;
    println!(
        "{} episodes over {} iterations, success rate {:.3}, report in {}",
        report.episodes,
        report.iterations,
        report.success_rate,
        out.display()
    );
    Ok(())
}

fn signal_dump(traj: &Trajectory) -> String {
    let vocab = Vocabulary::get();
    let mut out = String::from("turn,attempt,accepted,position,token,forced,entropy,confidence,m\n");
    for turn in &traj.turns {
        let cands = turn.rejected.iter().map(|c| (c, false)).chain([(&turn.candidate, true)]);
        for (cand, accepted) in cands {
            let mut signals = cand.signals.iter();
            for (pos, (&tok, &forced)) in cand.tokens.iter().zip(&cand.forced).enumerate() {
                let sig = if forced { None } else { signals.next() };
                let (h, c, m) = sig.map_or((String::new(), String::new(), String::new()), |s| {
                    (s.h.to_string(), s.c.to_string(), s.m.to_string())
                });
                let word = vocab.text(tok).replace('\n', "\\n");
                out.push_str(&format!(
                    "{},{},{accepted},{pos},{word},{forced},{h},{c},{m}\n",
                    turn.turn_index, cand.attempt
                ));
            }
        }
    }
    out
}

fn cmd_rollout(run: &RunArgs, policy: Option<&Path>, task: usize) -> Result<(), Failure> {
    let cfg = load_config(run)?;
    let params = base_policy(&cfg, policy)?;
    let traj = debug_episode(&cfg, &params, task).runtime()?;
    let dump = signal_dump(&traj);
    let mut transcript = String::new();
    for t in &traj.turns {
        transcript.push_str(&format!(
            "--- turn {} ({} rejected) reward {}\n{}\n",
            t.turn_index,
            t.rejected.len(),
            t.reward,
            t.candidate.text
        ));
    }
    transcript.push_str(&format!("task score {}\n", traj.task_score));
    match &run.out {
        Some(dir) => {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))
                .runtime()?;
            write_text(&dir.join("signals.csv"), &dump)?;
            write_text(&dir.join("transcript.txt"), &transcript)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(dump.as_bytes()).runtime()?;
            eprint!("{transcript}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { run, init } => cmd_train(run, init.as_deref()),
        Command::Rft { run, init } => cmd_rft(run, init.as_deref()),
        Command::Analyze {
            logs,
            baseline,
            out,
            bin_width,
        } => cmd_analyze(logs, baseline.as_deref(), out, *bin_width),
        Command::Rollout { run, policy, task } => cmd_rollout(run, policy.as_deref(), *task),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, err) = match &f {
                Failure::Config(e) => ("configuration error", e),
                Failure::Runtime(e) => ("error", e),
            };
            eprintln!("{kind}: {err:#}");
            ExitCode::from(f.code())
        }
    }
}
