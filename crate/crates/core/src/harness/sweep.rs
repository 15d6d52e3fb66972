//! λ × seed sweep over independent searches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DashError, Result};
use crate::eval::{eval_heldout_kl, HeldoutSet};
use crate::model::{HybridArch, ModelSpec, Parameters};
use crate::search::{run_search, SearchConfig};
use crate::training::{distill, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub lambda: f64,
    pub seed: u64,
    pub budget: f64,
    pub avg_entropy: f64,
    pub avg_top1: f64,
    pub avg_margin: f64,
    pub ambiguous: usize,
    pub heldout_kl: f64,
    pub arch: Option<HybridArch>,
    /// Set when the run failed; numeric fields are then NaN.
    pub error: Option<String>,
}

impl SweepRecord {
    fn failed(lambda: f64, seed: u64, err: &DashError) -> SweepRecord {
        SweepRecord {
            lambda,
            seed,
            budget: f64::NAN,
            avg_entropy: f64::NAN,
            avg_top1: f64::NAN,
            avg_margin: f64::NAN,
            ambiguous: 0,
            heldout_kl: f64::NAN,
            arch: None,
            error: Some(err.to_string()),
        }
    }
}

/// Worker count: `DASH_THREADS` if set and positive, else all cores.
pub fn worker_threads() -> usize {
    std::env::var("DASH_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Shared inputs of every run in a sweep.
pub struct SweepInputs<'a> {
    pub spec: &'a ModelSpec,
    pub teacher: &'a Parameters,
    pub candidates: &'a Parameters,
    pub train_tokens: &'a [u16],
    pub heldout: &'a HeldoutSet,
    pub search: &'a SearchConfig,
    /// When present, each architecture is distilled before evaluation.
    pub distill: Option<&'a TrainConfig>,
}

fn one_run(inputs: &SweepInputs<'_>, lambda: f64, seed: u64) -> Result<SweepRecord> {
    let cfg = SearchConfig {
        lambda,
        seed,
        ..inputs.search.clone()
    };
    let outcome = run_search(inputs.spec, inputs.candidates, inputs.train_tokens, &cfg)?;
    let student = match inputs.distill {
        Some(d) => {
            let d = TrainConfig { seed, ..d.clone() };
            distill(
                inputs.spec,
                inputs.teacher,
                inputs.candidates.clone(),
                &outcome.arch,
                inputs.train_tokens,
                &d,
            )?
            .params
        }
        None => inputs.candidates.clone(),
    };
    let heldout_kl = eval_heldout_kl(inputs.spec, &student, &outcome.arch, inputs.heldout)?;
    let d = &outcome.diagnostics;
    Ok(SweepRecord {
        lambda,
        seed,
        budget: outcome.budget,
        avg_entropy: d.avg_entropy,
        avg_top1: d.avg_top1,
        avg_margin: d.avg_margin,
        ambiguous: d.ambiguous,
        heldout_kl,
        arch: Some(outcome.arch),
        error: None,
    })
}

/// One search per `(λ, seed)` pair, λ-major. Runs execute in parallel with
/// no shared mutable state; a failed run becomes a record carrying its error.
pub fn run_sweep(inputs: &SweepInputs<'_>, lambdas: &[f64], seeds: &[u64]) -> Result<Vec<SweepRecord>> {
    let grid: Vec<(f64, u64)> = lambdas
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| DashError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        grid.par_iter()
            .map(|&(l, s)| one_run(inputs, l, s).unwrap_or_else(|e| SweepRecord::failed(l, s, &e)))
            .collect()
    }))
}

pub const SWEEP_CSV_HEADER: &str = "lambda,seed,budget,avg_entropy,avg_top1,avg_margin,ambiguous,heldout_kl";

pub fn sweep_csv(records: &[SweepRecord]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.lambda, r.seed, r.budget, r.avg_entropy, r.avg_top1, r.avg_margin, r.ambiguous, r.heldout_kl
        ));
    }
    out
}

/// One architecture per line (`-` for failed runs), in record order.
pub fn arch_lines(records: &[SweepRecord]) -> String {
    records
        .iter()
        .map(|r| r.arch.as_ref().map_or_else(|| "-".to_string(), ToString::to_string) + "\n")
        .collect()
}

/// Reads back `sweep.csv` and the matching architecture lines.
pub fn parse_sweep(csv: &str, archs: &str) -> Result<Vec<SweepRecord>> {
    let bad = |m: String| DashError::Config(format!("sweep table: {m}"));
    let mut lines = csv.lines();
    if lines.next() != Some(SWEEP_CSV_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    let arch_lines: Vec<&str> = archs.lines().collect();
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(format!("row {} has {} fields", i + 1, f.len())));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|e| bad(format!("row {}: {e}", i + 1)));
        let arch = match arch_lines.get(i) {
            Some(&"-") | None => None,
            Some(s) => Some(s.parse::<HybridArch>()?),
        };
        out.push(SweepRecord {
            lambda: num(0)?,
            seed: f[1].parse().map_err(|e| bad(format!("row {}: {e}", i + 1)))?,
            budget: num(2)?,
            avg_entropy: num(3)?,
            avg_top1: num(4)?,
            avg_margin: num(5)?,
            ambiguous: f[6].parse().map_err(|e| bad(format!("row {}: {e}", i + 1)))?,
            heldout_kl: num(7)?,
            error: if arch.is_none() {
                Some("failed run".into())
            } else {
                None
            },
            arch,
        });
    }
    Ok(out)
}

/// Median of the finite values; `None` when there are none.
pub fn median(xs: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(lambda: f64, seed: u64, budget: f64) -> SweepRecord {
        SweepRecord {
            lambda,
            seed,
            budget,
            avg_entropy: 0.5,
            avg_top1: 0.75,
            avg_margin: 0.25,
            ambiguous: 2,
            heldout_kl: 0.125,
            arch: Some("L F W L".parse().unwrap()),
            error: None,
        }
    }

    #[test]
    fn csv_round_trip() {
        let rs = vec![rec(0.001, 0, 2.0), rec(0.1, 2, 1.125)];
        let csv = sweep_csv(&rs);
        assert!(csv.starts_with("lambda,seed,budget,avg_entropy,avg_top1,avg_margin,ambiguous,heldout_kl\n"));
        assert_eq!(parse_sweep(&csv, &arch_lines(&rs)).unwrap(), rs);
    }

    #[test]
    fn median_of_odd_even_and_nan() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[f64::NAN, 1.0]), Some(1.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn threads_env_override() {
        // Only reads; the variable is not set by the test suite.
        assert!(worker_threads() >= 1);
    }
}
