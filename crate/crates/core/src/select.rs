//! Method dispatch from a pool (and optional scores) to a manifest.

use std::time::{Duration, Instant};

use crate::baselines::{self, DEFAULT_KMEANS_ITERS};
use crate::error::{Error, Result};
use crate::kernel::{self, ConditionalKernel, KernelMode, LazyKernel, DEFAULT_EPSILON_REG};
use crate::map_greedy::{fill_by_score, greedy_map, SelectionTrace, DEFAULT_RANK_TOL};
use crate::pool_io::{manifest_timestamp, CandidatePool, Method, SelectionManifest};
use crate::scoring::ScoreVector;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectParams {
    pub method: Method,
    pub budget: usize,
    pub lambda: f64,
    pub seed: u64,
    pub epsilon_reg: f64,
    pub rank_tol: f64,
    pub kernel_mode: KernelMode,
    pub kmeans_iters: usize,
}

impl Default for SelectParams {
    fn default() -> Self {
        SelectParams {
            method: Method::LmDpp,
            budget: 16,
            lambda: 0.5,
            seed: 0,
            epsilon_reg: DEFAULT_EPSILON_REG,
            rank_tol: DEFAULT_RANK_TOL,
            kernel_mode: KernelMode::Auto,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub manifest: SelectionManifest,
    /// Pool indices in selection order.
    pub indices: Vec<usize>,
    /// Present for the DPP methods.
    pub trace: Option<SelectionTrace>,
    pub wall_time: Duration,
}

/// The method that actually runs: `lm_dpp` with lambda 0 is the vanilla
/// DPP and with lambda 1 is perplexity top-M.
pub fn effective_method(method: Method, lambda: f64) -> Method {
    match method {
        Method::LmDpp if lambda == 0.0 => Method::VanillaDpp,
        Method::LmDpp if lambda == 1.0 => Method::PerplexityTopk,
        m => m,
    }
}

fn dpp_trace(
    pool: &CandidatePool,
    scores: Option<&ScoreVector>,
    lambda: f64,
    params: &SelectParams,
) -> Result<SelectionTrace> {
    let trace = if params.kernel_mode.use_dense(pool.len()) {
        let sim = kernel::build_similarity(pool, params.epsilon_reg)?;
        let k = match scores {
            Some(s) if lambda > 0.0 => kernel::build_conditional_kernel(&sim, s, lambda)?,
            _ => ConditionalKernel::from_similarity(&sim),
        };
        greedy_map(&k, params.budget, params.rank_tol)?
    } else {
        let weighted = scores.filter(|_| lambda > 0.0);
        let k = LazyKernel::new(pool, weighted, lambda, params.epsilon_reg)?;
        greedy_map(&k, params.budget, params.rank_tol)?
    };
    let fill_scores = match scores {
        Some(s) => s.clone(),
        None => ScoreVector::raw(vec![0.0; pool.len()]),
    };
    Ok(fill_by_score(trace, &fill_scores, params.budget))
}

pub fn select(
    pool: &CandidatePool,
    scores: Option<&ScoreVector>,
    params: &SelectParams,
) -> Result<SelectionOutcome> {
    if params.budget < 1 {
        return Err(Error::BadBudget);
    }
    if !(0.0..=1.0).contains(&params.lambda) {
        return Err(Error::LambdaRange(params.lambda));
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if let Some(s) = scores {
        if s.len() != pool.len() {
            return Err(Error::SizeMismatch {
                expected: pool.len(),
                got: s.len(),
            });
        }
    }
    let method = effective_method(params.method, params.lambda);
    if method.needs_scores() && scores.is_none() {
        return Err(Error::MissingScores(method.as_str()));
    }

    let start = Instant::now();
    let (indices, trace) = match method {
        Method::LmDpp => {
            let t = dpp_trace(pool, scores, params.lambda, params)?;
            (t.indices(), Some(t))
        }
        Method::VanillaDpp => {
            let t = dpp_trace(pool, scores, 0.0, params)?;
            (t.indices(), Some(t))
        }
        Method::PerplexityTopk => (
            baselines::select_perplexity_topk(scores.expect("checked above"), params.budget)?,
            None,
        ),
        Method::Random => (baselines::select_random(pool.len(), params.budget, params.seed)?, None),
        Method::Kmeans => (
            baselines::select_kmeans(pool, params.budget, params.seed, params.kmeans_iters)?.0,
            None,
        ),
    };
    let wall_time = start.elapsed();

    let is_dpp = trace.is_some();
    let manifest = SelectionManifest {
        method,
        requested_method: params.method,
        budget: params.budget,
        lambda: match method {
            Method::VanillaDpp => 0.0,
            _ => params.lambda,
        },
        seed: params.seed,
        pool_size: pool.len(),
        selected_ids: indices.iter().map(|&i| pool.items()[i].id.clone()).collect(),
        gains: match &trace {
            Some(t) => t.gains(),
            None => vec![0.0; indices.len()],
        },
        cumulative_logdet: trace.as_ref().map(SelectionTrace::logdet),
        stop_reason: trace.as_ref().map(|t| t.stop_reason),
        fallback_count: trace.as_ref().map_or(0, SelectionTrace::fallback_count),
        epsilon_reg: is_dpp.then_some(params.epsilon_reg),
        rank_tol: is_dpp.then_some(params.rank_tol),
        created_at: manifest_timestamp(),
    };
    Ok(SelectionOutcome {
        manifest,
        indices,
        trace,
        wall_time,
    })
}
