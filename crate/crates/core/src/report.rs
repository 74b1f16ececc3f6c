//! Efficiency reports computed from trajectory logs alone.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rollout::{TurnLog, LOG_SCHEMA_VERSION};
use crate::tti::TriggerCause;
use crate::train::{fmt_opt, NULL};

/// Share of final iterations averaged into the final success rate.
pub const FINAL_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Schema { path: PathBuf, line: usize, message: String },
}

pub fn parse_logs(path: &Path, text: impl BufRead) -> Result<Vec<TurnLog>, ReportError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let schema_err = |message: String| ReportError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: TurnLog = serde_json::from_str(&line).map_err(|e| schema_err(e.to_string()))?;
        if rec.schema != LOG_SCHEMA_VERSION {
            return Err(schema_err(format!(
                "schema version {} (expected {LOG_SCHEMA_VERSION})",
                rec.schema
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_logs(path: &Path) -> Result<Vec<TurnLog>, ReportError> {
    let f = fs::File::open(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_logs(path, BufReader::new(f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub iteration: usize,
    pub turns: usize,
    /// Generated tokens including rejected candidates.
    pub tokens: usize,
    pub score: f64,
    pub success: bool,
}

/// Rebuild episodes keyed by run, iteration, group and trajectory.
pub fn episodes(logs: &[TurnLog]) -> Vec<EpisodeSummary> {
    let mut map: BTreeMap<(&str, usize, usize, usize), EpisodeSummary> = BTreeMap::new();
    for r in logs {
        let e = map
            .entry((r.run_id.as_str(), r.iteration, r.group_index, r.traj_index))
            .or_insert(EpisodeSummary {
                iteration: r.iteration,
                turns: 0,
                tokens: 0,
                score: 0.0,
                success: false,
            });
        e.turns += 1;
        e.tokens += r.tokens.len() + r.rejected_tokens;
        if let Some(s) = r.task_score {
            e.score = s;
            e.success = s >= 1.0 - 1e-9;
        }
    }
    map.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub iterations: usize,
    pub episodes: usize,
    pub tokens_per_success_histogram: Vec<HistogramBin>,
    pub success_rate_curve: Vec<Option<f64>>,
    pub tokens_per_success_curve: Vec<Option<f64>>,
    pub turns_per_success_curve: Vec<Option<f64>>,
    pub truncation_fraction_curve: Vec<Option<f64>>,
    pub success_rate: f64,
    pub final_success_rate: Option<f64>,
    pub mean_tokens_per_success: Option<f64>,
    pub mean_turns_per_success: Option<f64>,
    pub truncation_fraction: f64,
    pub tti_trigger_rate: f64,
    pub tds_regen_rate: f64,
}

fn mean<I: IntoIterator<Item = f64>>(xs: I) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn build_report(logs: &[TurnLog], bin_width: usize) -> EfficiencyReport {
    let bin_width = bin_width.max(1);
    let eps = episodes(logs);
    let iterations = logs.iter().map(|r| r.iteration + 1).max().unwrap_or(0);

    let mut by_iter: Vec<Vec<&EpisodeSummary>> = vec![Vec::new(); iterations];
    for e in &eps {
        by_iter[e.iteration].push(e);
    }
    let mut turns_by_iter = vec![(0usize, 0usize); iterations];
    for r in logs {
        let slot = &mut turns_by_iter[r.iteration];
        slot.0 += 1;
        slot.1 += usize::from(r.tti_event.is_some_and(|t| t.cause == TriggerCause::Budget));
    }

    let success_curve: Vec<Option<f64>> = by_iter
        .iter()
        .map(|v| mean(v.iter().map(|e| f64::from(u8::from(e.success)))))
        .collect();
    let succ_only = |f: fn(&EpisodeSummary) -> f64| -> Vec<Option<f64>> {
        by_iter
            .iter()
            .map(|v| mean(v.iter().filter(|e| e.success).map(|e| f(e))))
            .collect()
    };
    let tokens_curve = succ_only(|e| e.tokens as f64);
    let turns_curve = succ_only(|e| e.turns as f64);
    let trunc_curve = turns_by_iter
        .iter()
        .map(|&(n, b)| (n > 0).then(|| ratio(b, n)))
        .collect();

    let successes: Vec<&EpisodeSummary> = eps.iter().filter(|e| e.success).collect();
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for e in &successes {
        *hist.entry(e.tokens / bin_width).or_default() += 1;
    }
    let histogram = match (hist.keys().next(), hist.keys().next_back()) {
        (Some(&lo), Some(&hi)) => (lo..=hi)
            .map(|b| HistogramBin {
                lo: b * bin_width,
                hi: (b + 1) * bin_width,
                count: hist.get(&b).copied().unwrap_or(0),
            })
            .collect(),
        _ => Vec::new(),
    };

    let tail = ((iterations as f64 * FINAL_FRACTION).ceil() as usize).max(1);
    let final_success = mean(
        by_iter
            .iter()
            .skip(iterations.saturating_sub(tail))
            .flatten()
            .map(|e| f64::from(u8::from(e.success))),
    );
    let turns = logs.len();
    let attempts: usize = logs.iter().map(|r| r.tds_attempts).sum();
    EfficiencyReport {
        iterations,
        episodes: eps.len(),
        tokens_per_success_histogram: histogram,
        success_rate_curve: success_curve,
        tokens_per_success_curve: tokens_curve,
        turns_per_success_curve: turns_curve,
        truncation_fraction_curve: trunc_curve,
        success_rate: ratio(successes.len(), eps.len()),
        final_success_rate: final_success,
        mean_tokens_per_success: mean(successes.iter().map(|e| e.tokens as f64)),
        mean_turns_per_success: mean(successes.iter().map(|e| e.turns as f64)),
        truncation_fraction: ratio(
            logs.iter()
                .filter(|r| r.tti_event.is_some_and(|t| t.cause == TriggerCause::Budget))
                .count(),
            turns,
        ),
        tti_trigger_rate: ratio(
            logs.iter()
                .filter(|r| r.tti_event.is_some_and(|t| t.cause == TriggerCause::Window))
                .count(),
            turns,
        ),
        tds_regen_rate: ratio(attempts.saturating_sub(turns), attempts),
    }
}

/// Relative change of the controlled arm against the baseline, in percent
/// of the baseline (negative means fewer).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub token_reduction_pct: Option<f64>,
    pub turn_reduction_pct: Option<f64>,
    pub success_rate_delta: f64,
    pub final_success_rate_delta: Option<f64>,
}

pub fn compare(baseline: &EfficiencyReport, controlled: &EfficiencyReport) -> Comparison {
    let reduction = |b: Option<f64>, c: Option<f64>| match (b, c) {
        (Some(b), Some(c)) if b > 0.0 => Some(100.0 * (b - c) / b),
        _ => None,
    };
    Comparison {
        token_reduction_pct: reduction(baseline.mean_tokens_per_success, controlled.mean_tokens_per_success),
        turn_reduction_pct: reduction(baseline.mean_turns_per_success, controlled.mean_turns_per_success),
        success_rate_delta: controlled.success_rate - baseline.success_rate,
        final_success_rate_delta: match (baseline.final_success_rate, controlled.final_success_rate) {
            (Some(b), Some(c)) => Some(c - b),
            _ => None,
        },
    }
}

fn write(path: PathBuf, text: String) -> Result<(), ReportError> {
    fs::write(&path, text).map_err(|source| ReportError::Io { path, source })
}

fn summary_rows(r: &EfficiencyReport) -> Vec<(&'static str, String)> {
    vec![
        ("iterations", r.iterations.to_string()),
        ("episodes", r.episodes.to_string()),
        ("success_rate", r.success_rate.to_string()),
        ("final_success_rate", fmt_opt(r.final_success_rate)),
        ("mean_tokens_per_success", fmt_opt(r.mean_tokens_per_success)),
        ("mean_turns_per_success", fmt_opt(r.mean_turns_per_success)),
        ("truncation_fraction", r.truncation_fraction.to_string()),
        ("tti_trigger_rate", r.tti_trigger_rate.to_string()),
        ("tds_regen_rate", r.tds_regen_rate.to_string()),
    ]
}

/// Write `summary.csv`, `curves.csv`, `histogram.csv` and, for paired runs,
/// `comparison.csv` into `dir`.
pub fn write_report(
    dir: &Path,
    report: &EfficiencyReport,
    baseline: Option<&EfficiencyReport>,
) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut summary = String::from("metric,value\n");
    for (k, v) in summary_rows(report) {
        summary.push_str(&format!("{k},{v}\n"));
    }
    write(dir.join("summary.csv"), summary)?;

    let mut curves = String::from("iteration,success_rate,tokens_per_success,turns_per_success,truncation_fraction\n");
    for i in 0..report.iterations {
        curves.push_str(&format!(
            "{i},{},{},{},{}\n",
            fmt_opt(report.success_rate_curve[i]),
            fmt_opt(report.tokens_per_success_curve[i]),
            fmt_opt(report.turns_per_success_curve[i]),
            fmt_opt(report.truncation_fraction_curve[i]),
        ));
    }
    write(dir.join("curves.csv"), curves)?;

    let mut hist = String::from("bin_lo,bin_hi,count\n");
    for b in &report.tokens_per_success_histogram {
        hist.push_str(&format!("{},{},{}\n", b.lo, b.hi, b.count));
    }
    write(dir.join("histogram.csv"), hist)?;

    if let Some(base) = baseline {
        let c = compare(base, report);
        let mut out = String::from("metric,baseline,controlled\n");
        for ((k, b), (_, v)) in summary_rows(base).into_iter().zip(summary_rows(report)) {
            out.push_str(&format!("{k},{b},{v}\n"));
        }
        out.push_str(&format!("token_reduction_pct,{NULL},{}\n", fmt_opt(c.token_reduction_pct)));
        out.push_str(&format!("turn_reduction_pct,{NULL},{}\n", fmt_opt(c.turn_reduction_pct)));
        out.push_str(&format!("success_rate_delta,{NULL},{}\n", c.success_rate_delta));
        write(dir.join("comparison.csv"), out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::TtiEvent;

    fn rec(iteration: usize, traj: usize, turn: usize, tokens: usize, score: Option<f64>) -> TurnLog {
        TurnLog {
            schema: LOG_SCHEMA_VERSION,
            run_id: "r".into(),
            iteration,
            task_id: "t".into(),
            group_index: 0,
            traj_index: traj,
            turn_index: turn,
            state_key: "s".into(),
            tokens: vec![0; tokens],
            signals: vec![],
            tti_event: None,
            tds_attempts: 1,
            rejected_tokens: 0,
            gamma: None,
            phi: 0.5,
            reward: 0.0,
            old_log_prob: -1.0,
            strict_valid: true,
            void: false,
            truncated: false,
            command: "search[a]".into(),
            done: score.is_some(),
            task_score: score,
        }
    }

    #[test]
    fn failed_only_log() {
        let logs = vec![rec(0, 0, 0, 10, None), rec(0, 0, 1, 10, Some(0.0)), rec(1, 0, 0, 5, Some(0.25))];
        let r = build_report(&logs, 50);
        assert!(r.tokens_per_success_histogram.is_empty());
        assert_eq!(r.success_rate, 0.0);
        assert_eq!(r.success_rate_curve, vec![Some(0.0), Some(0.0)]);
        assert_eq!(r.tokens_per_success_curve, vec![None, None]);
        assert_eq!(r.mean_tokens_per_success, None);
    }

    #[test]
    fn single_bin_histogram() {
        let logs: Vec<TurnLog> = (0..5)
            .flat_map(|t| vec![rec(0, t, 0, 60, None), rec(0, t, 1, 40, Some(1.0))])
            .collect();
        let r = build_report(&logs, 25);
        assert_eq!(r.tokens_per_success_histogram, vec![HistogramBin { lo: 100, hi: 125, count: 5 }]);
        assert_eq!(r.mean_tokens_per_success, Some(100.0));
        assert_eq!(r.mean_turns_per_success, Some(2.0));
    }

    #[test]
    fn curves_have_no_gaps_and_rates_are_counted() {
        let mut a = rec(0, 0, 0, 10, Some(1.0));
        a.tti_event = Some(TtiEvent {
            index: 30,
            cause: TriggerCause::Window,
        });
        a.tds_attempts = 3;
        let mut b = rec(3, 0, 0, 450, Some(0.0));
        b.tti_event = Some(TtiEvent {
            index: 450,
            cause: TriggerCause::Budget,
        });
        let r = build_report(&[a, b], 50);
        assert_eq!(r.iterations, 4);
        assert_eq!(r.success_rate_curve, vec![Some(1.0), None, None, Some(0.0)]);
        assert_eq!(r.truncation_fraction, 0.5);
        assert_eq!(r.tti_trigger_rate, 0.5);
        assert!((r.tds_regen_rate - 2.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn comparison_percentages() {
        let base: Vec<TurnLog> = (0..4).map(|t| rec(0, t, 0, 200, Some(1.0))).collect();
        let ctrl: Vec<TurnLog> = (0..4).map(|t| rec(0, t, 0, 150, Some(1.0))).collect();
        let c = compare(&build_report(&base, 50), &build_report(&ctrl, 50));
        assert_eq!(c.token_reduction_pct, Some(25.0));
        assert_eq!(c.turn_reduction_pct, Some(0.0));
    }

    #[test]
    fn schema_errors_name_the_line() {
        let good = serde_json::to_string(&rec(0, 0, 0, 1, None)).unwrap();
        let text = format!("{good}\n{{\"schema\":1}}\n");
        let err = parse_logs(Path::new("x.jsonl"), text.as_bytes()).unwrap_err();
        assert!(err.to_string().starts_with("x.jsonl:2:"), "{err}");
        let mut old = rec(0, 0, 0, 1, None);
        old.schema = 99;
        let err = parse_logs(Path::new("y"), serde_json::to_string(&old).unwrap().as_bytes()).unwrap_err();
        assert!(err.to_string().contains("schema version 99"));
    }

    #[test]
    fn report_files_byte_identical() {
        let logs: Vec<TurnLog> = (0..3).map(|t| rec(t, 0, 0, 30 * (t + 1), Some(1.0))).collect();
        let r = build_report(&logs, 25);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_report(d1.path(), &r, Some(&r)).unwrap();
        write_report(d2.path(), &build_report(&logs, 25), Some(&r)).unwrap();
        for f in ["summary.csv", "curves.csv", "histogram.csv", "comparison.csv"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap());
        }
    }
}
