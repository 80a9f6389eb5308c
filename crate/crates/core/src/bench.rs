//! Replication harness: simulate R paths per (T, k) cell, run the test on
//! each, tabulate rejection fractions.
//!
//! Each replication owns an RNG substream derived from base seed +
//! replication index, so the table is invariant to the worker count.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::{run_test, TestConfig};
use crate::error::{Error, Result};
use crate::rngutil::substream;
use crate::sim::{simulate, SimModel, DEFAULT_BURN_IN};

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub model: SimModel,
    /// Label written to the table's model column.
    pub model_label: String,
    pub k_range: Vec<usize>,
    pub t_list: Vec<usize>,
    pub replications: usize,
    pub workers: usize,
    pub burn_in: usize,
    /// Base configuration; replication r runs with seed = config.seed + r.
    pub config: TestConfig,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::Config("replications R must be >= 1".into()));
        }
        if self.k_range.is_empty() || self.t_list.is_empty() {
            return Err(Error::Config("k_range and T list must be nonempty".into()));
        }
        if self.workers < 1 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub t_len: usize,
    pub k: usize,
    pub rejection_fraction: f64,
    pub mean_p_value: f64,
    pub replications: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RejectionTable {
    pub rows: Vec<BenchRow>,
    /// Wall time lives only here, never in the CSV rows, so tables from
    /// repeated runs compare byte-identical.
    pub wall_seconds: f64,
}

impl RejectionTable {
    /// CSV rendering; excludes wall time (see `wall_seconds`).
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("model,T,k,rejection_fraction,mean_p_value,replications,failures\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.model,
                r.t_len,
                r.k,
                r.rejection_fraction,
                r.mean_p_value,
                r.replications,
                r.failures
            ));
        }
        out
    }

    pub fn total_failures(&self) -> usize {
        self.rows.iter().map(|r| r.failures).sum()
    }

    pub fn total_replications(&self) -> usize {
        self.rows.iter().map(|r| r.replications).sum()
    }

    /// True when more than 5% of replications failed (nonzero-exit condition).
    pub fn failure_excessive(&self) -> bool {
        let total = self.total_replications();
        total > 0 && self.total_failures() * 20 > total
    }
}

/// Run the bench. Replication failures are counted per row and the run
/// continues; callers should treat `failure_excessive()` as an error.
pub fn run_bench(spec: &BenchSpec) -> Result<RejectionTable> {
    spec.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;

    let mut rows = Vec::new();
    for &t_len in &spec.t_list {
        for &k in &spec.k_range {
            let outcomes: Vec<Option<(bool, f64)>> = pool.install(|| {
                use rayon::prelude::*;
                (0..spec.replications)
                    .into_par_iter()
                    .map(|rep| run_replication(spec, t_len, k, rep))
                    .collect()
            });
            let done: Vec<&(bool, f64)> = outcomes.iter().flatten().collect();
            let failures = spec.replications - done.len();
            let (frac, mean_p) = if done.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let nr = done.iter().filter(|(r, _)| *r).count();
                let sp: f64 = done.iter().map(|(_, p)| *p).sum();
                (nr as f64 / done.len() as f64, sp / done.len() as f64)
            };
            rows.push(BenchRow {
                model: spec.model_label.clone(),
                t_len,
                k,
                rejection_fraction: frac,
                mean_p_value: mean_p,
                replications: spec.replications,
                failures,
            });
            eprintln!(
                "bench: model={} T={} k={} rejection={:.3} failures={}",
                spec.model_label,
                t_len,
                k,
                rows.last().unwrap().rejection_fraction,
                failures
            );
        }
    }
    Ok(RejectionTable { rows, wall_seconds: start.elapsed().as_secs_f64() })
}

fn run_replication(spec: &BenchSpec, t_len: usize, k: usize, rep: usize) -> Option<(bool, f64)> {
    let rep_seed = spec.config.seed.wrapping_add(rep as u64);
    let mut sim_rng = substream(rep_seed, "bench-sim", &[t_len as u64, k as u64]);
    let series = match simulate(&spec.model, t_len, spec.burn_in, &mut sim_rng) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("bench: simulation failed (T={t_len} k={k} rep={rep}): {e}");
            return None;
        }
    };
    let config = TestConfig { seed: rep_seed, ..spec.config.clone() };
    match run_test(&series, k, &config) {
        Ok(report) => Some((report.reject, report.p_value)),
        Err(e) => {
            eprintln!("bench: test failed (T={t_len} k={k} rep={rep}): {e}");
            None
        }
    }
}

/// Default burn-in for bench simulations.
pub fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}
