//! HR@k / NDCG@k, multi-trial aggregation and significance tests.

mod stats;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::RankedList;

pub use stats::{inc_beta, ln_gamma, paired, student_t_two_sided, welch, TTestResult};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no ranked list for {} user(s): {}", .0.len(), .0.join(", "))]
    MissingRankings(Vec<String>),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("a t-test needs at least 2 trials per group, got {0} and {1}")]
    TooFewTrials(usize, usize),
    #[error("paired test needs equal group sizes, got {0} and {1}")]
    UnpairedSizes(usize, usize),
    #[error("metric '{0}' missing from a trial set")]
    MissingMetric(String),
}

fn rank_of(ranked: &[String], positive: &str) -> Option<usize> {
    ranked.iter().position(|i| i == positive).map(|p| p + 1)
}

pub fn hr_at_k(ranked: &[String], positive: &str, k: usize) -> f64 {
    match rank_of(ranked, positive) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_at_k(ranked: &[String], positive: &str, k: usize) -> f64 {
    match rank_of(ranked, positive) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_users: usize,
    /// Users without a test label.
    pub n_excluded: usize,
    /// Evaluated users whose positive was not in their ranked list.
    pub n_absent: usize,
}

impl MetricReport {
    /// `H@1 H@5 H@10 N@1 N@5 N@10` layout.
    pub fn table(&self) -> String {
        let mut head = String::new();
        let mut row = String::new();
        for (label, map) in [("H", &self.hr), ("N", &self.ndcg)] {
            for (k, v) in map {
                let _ = write!(head, "{:>8}", format!("{label}@{k}"));
                let _ = write!(row, "{v:>8.4}");
            }
        }
        format!("{head}\n{row}\nusers {}  excluded {}  absent {}\n", self.n_users, self.n_excluded, self.n_absent)
    }

    /// Flat `hr@k` / `ndcg@k` names.
    pub fn flat(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for (k, v) in &self.hr {
            m.insert(format!("hr@{k}"), *v);
        }
        for (k, v) in &self.ndcg {
            m.insert(format!("ndcg@{k}"), *v);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestLabel {
    pub user: String,
    pub positive: Option<String>,
}

/// Averages per-user metrics. Users are visited in sorted order so the sum
/// does not depend on input order.
pub fn evaluate(
    rankings: &HashMap<String, RankedList>,
    labels: &[TestLabel],
    ks: &[usize],
) -> Result<MetricReport, EvalError> {
    if ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    let mut labelled: Vec<(&str, &str)> = Vec::new();
    let mut excluded = 0;
    for l in labels {
        match &l.positive {
            Some(p) => labelled.push((&l.user, p)),
            None => excluded += 1,
        }
    }
    labelled.sort_unstable();
    let missing: Vec<String> = labelled
        .iter()
        .filter(|(u, _)| !rankings.contains_key(*u))
        .map(|(u, _)| u.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingRankings(missing));
    }
    let mut hr: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg = hr.clone();
    let mut absent = 0;
    for (u, p) in &labelled {
        let items = &rankings[*u].items;
        if rank_of(items, p).is_none() {
            absent += 1;
        }
        for &k in ks {
            *hr.get_mut(&k).expect("k inserted") += hr_at_k(items, p, k);
            *ndcg.get_mut(&k).expect("k inserted") += ndcg_at_k(items, p, k);
        }
    }
    let n = labelled.len();
    if n > 0 {
        for v in hr.values_mut().chain(ndcg.values_mut()) {
            *v /= n as f64;
        }
    }
    Ok(MetricReport {
        hr,
        ndcg,
        n_users: n,
        n_excluded: excluded,
        n_absent: absent,
    })
}

/// One metric series per name, one value per trial.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, Vec<f64>>,
}

impl TrialSet {
    pub fn push(&mut self, seed: u64, report: &MetricReport) {
        self.seeds.push(seed);
        for (name, v) in report.flat() {
            self.metrics.entry(name).or_default().push(v);
        }
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    /// (mean, sample std) per metric; std is 0 for a single trial.
    pub fn summary(&self) -> BTreeMap<String, (f64, f64)> {
        self.metrics
            .iter()
            .map(|(k, xs)| {
                let n = xs.len() as f64;
                let m = xs.iter().sum::<f64>() / n;
                let sd = if xs.len() > 1 {
                    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                (k.clone(), (m, sd))
            })
            .collect()
    }
}

/// Welch by default; `paired` pairs trials by position.
pub fn t_test(a: &[f64], b: &[f64], paired_trials: bool) -> Result<TTestResult, EvalError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::TooFewTrials(a.len(), b.len()));
    }
    if paired_trials {
        if a.len() != b.len() {
            return Err(EvalError::UnpairedSizes(a.len(), b.len()));
        }
        return Ok(paired(a, b));
    }
    Ok(welch(a, b))
}

/// Per-metric tests of `a` against `b`.
pub fn compare(a: &TrialSet, b: &TrialSet, paired_trials: bool) -> Result<BTreeMap<String, TTestResult>, EvalError> {
    let mut out = BTreeMap::new();
    for (name, xs) in &a.metrics {
        let ys = b.metrics.get(name).ok_or_else(|| EvalError::MissingMetric(name.clone()))?;
        out.insert(name.clone(), t_test(xs, ys, paired_trials)?);
    }
    Ok(out)
}
