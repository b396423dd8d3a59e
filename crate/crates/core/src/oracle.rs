//! Randomised equivalence check of incremental greedy MAP against literal
//! log-determinant differences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::rng;
use crate::error::{Error, Result};
use crate::kernel::{build_conditional_kernel, build_similarity, ConditionalKernel};
use crate::map_greedy::{brute_force_greedy_step, greedy_map, SelectionTrace, DEFAULT_RANK_TOL};
use crate::pool_io::{normalize_pool, CandidateItem, CandidatePool};
use crate::scoring::ScoreVector;

/// Largest pool the brute-force side is allowed to enumerate.
pub const MAX_N: usize = 10;
pub const MAX_M: usize = 5;
pub const GAIN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleConfig {
    pub n: usize,
    pub m: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            n: 8,
            m: 4,
            trials: 200,
            seed: 0,
        }
    }
}

/// A failing trial, with enough data to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub trial: usize,
    pub n: usize,
    pub budget: usize,
    /// Row-major `n x n` kernel.
    pub kernel: Vec<f64>,
    pub step: usize,
    pub expected_index: Option<usize>,
    pub got_index: Option<usize>,
    pub expected_gain: Option<f64>,
    pub got_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub trials: usize,
    pub max_gain_deviation: f64,
    pub mismatches: usize,
    pub first_counterexample: Option<Counterexample>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// A conditional kernel over a random full-rank pool with random scores and
/// a random trade-off in `[0, 0.8]`.
pub fn random_kernel(n: usize, rng: &mut impl Rng) -> ConditionalKernel {
    let dim = n + 4;
    let items = (0..n)
        .map(|i| {
            let e: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            CandidateItem::new(format!("o{i}"), "o").with_embedding(e)
        })
        .collect();
    let pool = normalize_pool(CandidatePool::new(items).expect("generated ids are unique"))
        .expect("random embeddings are non-zero");
    let scores = ScoreVector::raw((0..n).map(|_| rng.gen()).collect());
    let lambda = rng.gen::<f64>() * 0.8;
    let sim = build_similarity(&pool, 1e-6).expect("pool is normalized");
    build_conditional_kernel(&sim, &scores, lambda).expect("sizes match")
}

/// Runs `greedy` on `trials` random kernels and compares every step against
/// [`brute_force_greedy_step`].
pub fn run_oracle_check<F>(cfg: OracleConfig, greedy: F) -> Result<OracleReport>
where
    F: Fn(&ConditionalKernel, usize) -> Result<SelectionTrace>,
{
    if cfg.n == 0 || cfg.n > MAX_N || cfg.m == 0 || cfg.m > MAX_M {
        return Err(Error::InvalidParam(format!(
            "oracle check needs 1 <= n <= {MAX_N} and 1 <= m <= {MAX_M}"
        )));
    }
    let mut rng = rng(cfg.seed);
    let mut report = OracleReport {
        trials: cfg.trials,
        max_gain_deviation: 0.0,
        mismatches: 0,
        first_counterexample: None,
    };

    for trial in 0..cfg.trials {
        let kernel = random_kernel(cfg.n, &mut rng);
        let trace = greedy(&kernel, cfg.m)?;
        let mut current = Vec::new();
        let mut failure = None;
        for step in 0..cfg.m.min(cfg.n) {
            let expected = brute_force_greedy_step(&kernel, &current).ok();
            let got = trace.steps.get(step).map(|s| (s.index, s.gain));
            let ok = match (expected, got) {
                (Some((ei, eg)), Some((gi, gg))) => {
                    let dev = (eg - gg).abs();
                    report.max_gain_deviation = report.max_gain_deviation.max(dev);
                    ei == gi && dev <= GAIN_TOL
                }
                (None, None) => true,
                _ => false,
            };
            if !ok {
                failure = Some(Counterexample {
                    trial,
                    n: cfg.n,
                    budget: cfg.m,
                    kernel: kernel.as_slice().to_vec(),
                    step,
                    expected_index: expected.map(|e| e.0),
                    got_index: got.map(|g| g.0),
                    expected_gain: expected.map(|e| e.1),
                    got_gain: got.map(|g| g.1),
                });
                break;
            }
            match expected {
                Some((i, _)) => current.push(i),
                None => break,
            }
        }
        if let Some(cx) = failure {
            report.mismatches += 1;
            report.first_counterexample.get_or_insert(cx);
        }
    }
    Ok(report)
}

/// The production greedy routine with the default rank tolerance.
pub fn default_greedy(kernel: &ConditionalKernel, budget: usize) -> Result<SelectionTrace> {
    greedy_map(kernel, budget, DEFAULT_RANK_TOL)
}
