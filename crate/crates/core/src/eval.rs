//! Interactive retrieval metrics and the simulated benchmark harness.
//!
//! A [`RankTrace`] holds the target's 1-based rank after every round,
//! round 0 being the initial query. Recall@k looks at one round; Hit@k asks
//! whether the target reached the top k at any round so far. BRI is the
//! trapezoidal integral of the log best-rank-so-far, averaged over rounds
//! and traces (lower is better, 0 when every target starts at rank 1).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{AnswerMode, Engine, SessionConfig, SessionError, SessionState};

pub const K_VALUES: [usize; 3] = [1, 5, 10];
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("round {round} is outside the traces (shortest covers {available} rounds)")]
    RoundOutOfRange { round: usize, available: usize },
    #[error("no traces to aggregate")]
    NoTraces,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("benchmark line {line}: {message}")]
    Bench { line: usize, message: String },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTrace {
    pub query_id: String,
    pub target_id: String,
    /// Rank after each round, padded with the last observed rank when the
    /// session stopped before the final round.
    pub ranks: Vec<usize>,
    /// Rounds the session actually ran.
    #[serde(default)]
    pub rounds_used: usize,
    #[serde(default)]
    pub tas: Vec<f64>,
    #[serde(default)]
    pub mus: Vec<f64>,
}

impl RankTrace {
    pub fn new(query_id: impl Into<String>, target_id: impl Into<String>, ranks: Vec<usize>) -> Self {
        let rounds_used = ranks.len().saturating_sub(1);
        Self {
            query_id: query_id.into(),
            target_id: target_id.into(),
            ranks,
            rounds_used,
            tas: Vec::new(),
            mus: Vec::new(),
        }
    }

    /// Best rank over rounds `0..=round`.
    pub fn best_rank(&self, round: usize) -> usize {
        self.ranks[..=round].iter().copied().min().expect("non-empty prefix")
    }
}

fn check_round(traces: &[RankTrace], round: usize) -> Result<()> {
    if traces.is_empty() {
        return Err(EvalError::NoTraces);
    }
    let available = traces.iter().map(|t| t.ranks.len()).min().unwrap_or(0);
    if round >= available {
        return Err(EvalError::RoundOutOfRange { round, available });
    }
    Ok(())
}

fn fraction(traces: &[RankTrace], hit: impl Fn(&RankTrace) -> bool) -> f64 {
    traces.iter().filter(|t| hit(t)).count() as f64 / traces.len() as f64
}

pub fn recall_at_k(traces: &[RankTrace], k: usize, round: usize) -> Result<f64> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    check_round(traces, round)?;
    Ok(fraction(traces, |t| t.ranks[round] <= k))
}

pub fn hit_at_k(traces: &[RankTrace], k: usize, round: usize) -> Result<f64> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    check_round(traces, round)?;
    Ok(fraction(traces, |t| t.best_rank(round) <= k))
}

pub fn mean_rank(traces: &[RankTrace], round: usize) -> Result<f64> {
    check_round(traces, round)?;
    Ok(traces.iter().map(|t| t.ranks[round] as f64).sum::<f64>() / traces.len() as f64)
}

/// Lower median.
pub fn median_rank(traces: &[RankTrace], round: usize) -> Result<usize> {
    check_round(traces, round)?;
    let mut r: Vec<usize> = traces.iter().map(|t| t.ranks[round]).collect();
    r.sort_unstable();
    Ok(r[(r.len() - 1) / 2])
}

/// BRI of one sequence of best-so-far ranks `b_0..=b_T`.
pub fn bri_from_best(best: &[f64]) -> f64 {
    let t = best.len() - 1;
    let sum: f64 = best.windows(2).map(|w| 0.5 * (w[0].ln() + w[1].ln())).sum();
    sum / t as f64
}

/// Mean BRI over traces, integrating rounds `0..=rounds`.
pub fn bri(traces: &[RankTrace], rounds: usize) -> Result<f64> {
    if rounds == 0 {
        return Err(EvalError::RoundOutOfRange {
            round: 0,
            available: 0,
        });
    }
    check_round(traces, rounds)?;
    let total: f64 = traces
        .iter()
        .map(|t| {
            let best: Vec<f64> = (0..=rounds).map(|r| t.best_rank(r) as f64).collect();
            bri_from_best(&best)
        })
        .sum();
    Ok(total / traces.len() as f64)
}

/// One benchmark query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchQuery {
    pub query_id: String,
    pub text: String,
    pub target_id: String,
}

pub fn read_bench(path: &Path) -> Result<Vec<BenchQuery>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: BenchQuery = serde_json::from_str(&line).map_err(|e| EvalError::Bench {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(q);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub recall: BTreeMap<usize, f64>,
    pub hit: BTreeMap<usize, f64>,
    pub mean_rank: f64,
    pub median_rank: usize,
    /// BRI integrated up to this round; absent for round 0.
    pub bri: Option<f64>,
    /// Means over the sessions still running at this round.
    pub mean_tas: Option<f64>,
    pub mean_mus: Option<f64>,
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub rounds: usize,
    pub queries: usize,
    pub evaluated: usize,
    pub excluded: usize,
    pub failures: Vec<QueryFailure>,
    pub bri: f64,
    pub mean_rounds_used: f64,
    pub per_round: Vec<RoundMetrics>,
    pub config: SessionConfig,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Aggregates traces that all cover rounds `0..=rounds`.
pub fn build_report(
    traces: &[RankTrace],
    rounds: usize,
    failures: Vec<QueryFailure>,
    config: &SessionConfig,
) -> Result<EvalReport> {
    let mut per_round = Vec::with_capacity(rounds + 1);
    for r in 0..=rounds {
        let mut recall = BTreeMap::new();
        let mut hit = BTreeMap::new();
        for k in K_VALUES {
            recall.insert(k, recall_at_k(traces, k, r)?);
            hit.insert(k, hit_at_k(traces, k, r)?);
        }
        per_round.push(RoundMetrics {
            round: r,
            recall,
            hit,
            mean_rank: mean_rank(traces, r)?,
            median_rank: median_rank(traces, r)?,
            bri: if r == 0 { None } else { Some(bri(traces, r)?) },
            mean_tas: mean(traces.iter().filter_map(|t| t.tas.get(r).copied())),
            mean_mus: mean(traces.iter().filter_map(|t| t.mus.get(r).copied())),
            active: traces.iter().filter(|t| t.tas.len() > r).count(),
        });
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rounds,
        queries: traces.len() + failures.len(),
        evaluated: traces.len(),
        excluded: failures.len(),
        failures,
        bri: if rounds == 0 { 0.0 } else { bri(traces, rounds)? },
        mean_rounds_used: mean(traces.iter().map(|t| t.rounds_used as f64)).unwrap_or(0.0),
        per_round,
        config: config.clone(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// Per-round table: one row per metric, one column per round.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for r in &self.per_round {
            let _ = write!(out, ",{}", r.round);
        }
        out.push('\n');
        let mut row = |name: &str, cell: &dyn Fn(&RoundMetrics) -> String| {
            out.push_str(name);
            for r in &self.per_round {
                out.push(',');
                out.push_str(&cell(r));
            }
            out.push('\n');
        };
        for k in K_VALUES {
            row(&format!("recall@{k}"), &|r| r.recall[&k].to_string());
        }
        for k in K_VALUES {
            row(&format!("hit@{k}"), &|r| r.hit[&k].to_string());
        }
        row("mnr", &|r| r.mean_rank.to_string());
        row("mdr", &|r| r.median_rank.to_string());
        row("bri", &|r| fmt_opt(r.bri));
        row("mean_tas", &|r| fmt_opt(r.mean_tas));
        row("mean_mus", &|r| fmt_opt(r.mean_mus));
        row("active", &|r| r.active.to_string());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub report: EvalReport,
    pub traces: Vec<RankTrace>,
}

impl BenchmarkRun {
    pub fn traces_jsonl(&self) -> String {
        self.traces
            .iter()
            .map(|t| serde_json::to_string(t).expect("trace serializes") + "\n")
            .collect()
    }

    /// Writes `report.json`, `report.csv`, and `traces.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)? + "\n")?;
        fs::write(dir.join("report.csv"), self.report.to_csv())?;
        fs::write(dir.join("traces.jsonl"), self.traces_jsonl())?;
        Ok(())
    }
}

fn trace_of(q: &BenchQuery, state: &SessionState, rounds: usize) -> RankTrace {
    let mut ranks = state.target_ranks.clone();
    let last = *ranks.last().expect("round-0 rank recorded");
    ranks.resize(rounds + 1, last);
    RankTrace {
        query_id: q.query_id.clone(),
        target_id: q.target_id.clone(),
        ranks,
        rounds_used: state.round,
        tas: state.reports.iter().map(|r| r.tas).collect(),
        mus: state.reports.iter().map(|r| r.mus).collect(),
    }
}

/// Runs a simulated session per query, in parallel, and aggregates the
/// traces. `config.max_rounds` sets the number of rounds. Queries whose
/// session fails are listed in the report and left out of the metrics.
pub fn run_benchmark(engine: &Engine, queries: &[BenchQuery], config: &SessionConfig) -> Result<BenchmarkRun> {
    let config = SessionConfig {
        answer_mode: AnswerMode::Simulated,
        ..config.clone()
    };
    config.validate()?;
    let rounds = config.max_rounds;
    let outcomes: Vec<std::result::Result<RankTrace, QueryFailure>> = queries
        .par_iter()
        .map(|q| {
            engine
                .start(q.query_id.clone(), config.clone(), &q.text, Some(&q.target_id))
                .and_then(|s| engine.run_simulated(&s))
                .map(|s| trace_of(q, &s, rounds))
                .map_err(|e| QueryFailure {
                    query_id: q.query_id.clone(),
                    error: e.to_string(),
                })
        })
        .collect();
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(t) => traces.push(t),
            Err(f) => {
                tracing::warn!(query = %f.query_id, error = %f.error, "query excluded");
                failures.push(f);
            }
        }
    }
    let report = build_report(&traces, rounds, failures, &config)?;
    Ok(BenchmarkRun { report, traces })
}
