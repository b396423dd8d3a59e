//! Greedy MAP inference for a DPP with incremental Cholesky updates.
//!
//! Each step adds the item with the largest marginal gain
//! `log det L_{S+j} - log det L_S`. That gain is `log d2_j`, where `d2_j` is
//! the squared Schur-complement residual of `j` against the selected set, so
//! keeping one growing Cholesky row per candidate makes a step `O(N k)` and a
//! full run of `M` steps `O(N M^2)` plus kernel-row evaluations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelRows;
use crate::par;
use crate::scoring::ScoreVector;

pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BudgetReached,
    RankExhausted,
    PoolExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    pub index: usize,
    /// `log d2` at selection time; `-inf` for score-filled steps.
    pub gain: f64,
    /// Log-determinant of the DPP-selected prefix up to this step.
    pub cumulative_logdet: f64,
    /// Set for steps appended by [`fill_by_score`].
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionTrace {
    pub steps: Vec<TraceStep>,
    pub stop_reason: StopReason,
}

impl SelectionTrace {
    pub fn indices(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.index).collect()
    }

    pub fn gains(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.gain).collect()
    }

    pub fn logdet(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cumulative_logdet)
    }

    pub fn fallback_count(&self) -> usize {
        self.steps.iter().filter(|s| s.fallback).count()
    }
}

/// Squared residuals and partial Cholesky rows for every candidate.
///
/// After `k` selections, `d2[i] = L_ii - |c_i[..k]|^2` for every active `i`.
#[derive(Debug, Clone)]
pub struct CholeskyState {
    d2: Vec<f64>,
    /// Row-major `N x capacity`; only the first `selected.len()` columns are live.
    c: Vec<f64>,
    capacity: usize,
    active: Vec<bool>,
    selected: Vec<usize>,
}

impl CholeskyState {
    pub fn new<K: KernelRows + ?Sized>(kernel: &K, capacity: usize) -> Result<Self> {
        let n = kernel.size();
        let mut d2 = Vec::with_capacity(n);
        for i in 0..n {
            let v = kernel.diag(i);
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::BadKernel(i));
            }
            d2.push(v);
        }
        let capacity = capacity.min(n);
        Ok(CholeskyState {
            d2,
            c: vec![0.0; n * capacity],
            capacity,
            active: vec![true; n],
            selected: Vec::with_capacity(capacity),
        })
    }

    pub fn d2(&self) -> &[f64] {
        &self.d2
    }

    pub fn c_row(&self, i: usize) -> &[f64] {
        let k = self.selected.len();
        &self.c[i * self.capacity..i * self.capacity + k]
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// Best active candidate: largest `d2`, lowest index on ties.
    pub fn best(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.d2.iter().enumerate() {
            if self.active[i] && best.is_none_or(|b| par::better((i, v), b)) {
                best = Some((i, v));
            }
        }
        best
    }

    /// Adds `j` to the selected set, extends every active row by one Cholesky
    /// entry and returns the new best candidate.
    pub fn select<K: KernelRows + ?Sized>(&mut self, kernel: &K, j: usize) -> Option<(usize, f64)> {
        assert!(self.active[j], "item {j} already selected");
        assert!(self.selected.len() < self.capacity, "capacity exhausted");
        let k = self.selected.len();
        let dj = self.d2[j].sqrt();
        let cj: Vec<f64> = self.c_row(j).to_vec();
        self.active[j] = false;
        self.selected.push(j);

        let active = &self.active;
        par::update_rows_argmax(&mut self.c, self.capacity, &mut self.d2, |i, row, d2i| {
            if !active[i] {
                return None;
            }
            let proj: f64 = cj.iter().zip(&row[..k]).map(|(a, b)| a * b).sum();
            let e = (kernel.entry(j, i) - proj) / dj;
            row[k] = e;
            *d2i -= e * e;
            Some(*d2i)
        })
    }
}

/// Greedy MAP with lowest-index tie-breaking.
///
/// Stops after `budget` selections, when every remaining `d2` is at most
/// `rank_tol` ([`StopReason::RankExhausted`]), or when the pool runs out.
pub fn greedy_map<K: KernelRows + ?Sized>(kernel: &K, budget: usize, rank_tol: f64) -> Result<SelectionTrace> {
    if budget < 1 {
        return Err(Error::BadBudget);
    }
    let mut state = CholeskyState::new(kernel, budget)?;
    let mut best = state.best();
    let mut steps = Vec::with_capacity(state.capacity);
    let mut cumulative = 0.0;

    let stop_reason = loop {
        if steps.len() == budget {
            break StopReason::BudgetReached;
        }
        let Some((j, d2j)) = best else {
            break StopReason::PoolExhausted;
        };
        if d2j <= rank_tol {
            break StopReason::RankExhausted;
        }
        let gain = d2j.ln();
        cumulative += gain;
        steps.push(TraceStep {
            index: j,
            gain,
            cumulative_logdet: cumulative,
            fallback: false,
        });
        best = if steps.len() < state.capacity {
            state.select(kernel, j)
        } else {
            None
        };
    };
    Ok(SelectionTrace { steps, stop_reason })
}

/// Log-determinant of the principal submatrix on `subset`, from a fresh
/// dense Cholesky factorisation. Returns `-inf` when a pivot is not positive.
pub fn brute_force_logdet<K: KernelRows + ?Sized>(kernel: &K, subset: &[usize]) -> f64 {
    let k = subset.len();
    let mut a: Vec<f64> = subset
        .iter()
        .flat_map(|&i| subset.iter().map(move |&j| kernel.entry(i, j)))
        .collect();
    let mut logdet = 0.0;
    for col in 0..k {
        let mut pivot = a[col * k + col];
        for m in 0..col {
            pivot -= a[col * k + m] * a[col * k + m];
        }
        if pivot.is_nan() || pivot <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let d = pivot.sqrt();
        a[col * k + col] = d;
        logdet += pivot.ln();
        for row in col + 1..k {
            let mut v = a[row * k + col];
            for m in 0..col {
                v -= a[row * k + m] * a[col * k + m];
            }
            a[row * k + col] = v / d;
        }
    }
    logdet
}

/// One greedy step evaluated literally: every candidate's gain is a
/// difference of two fresh log-determinants. Ties within `1e-12` go to the
/// lowest index.
pub fn brute_force_greedy_step<K: KernelRows + ?Sized>(kernel: &K, current: &[usize]) -> Result<(usize, f64)> {
    let base = brute_force_logdet(kernel, current);
    let mut subset = current.to_vec();
    subset.push(0);
    let gains: Vec<(usize, f64)> = (0..kernel.size())
        .filter(|j| !current.contains(j))
        .map(|j| {
            *subset.last_mut().unwrap() = j;
            (j, brute_force_logdet(kernel, &subset) - base)
        })
        .collect();
    let max = gains
        .iter()
        .map(|g| g.1)
        .filter(|g| !g.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::RankExhausted);
    }
    Ok(*gains.iter().find(|g| g.1 >= max - 1e-12).unwrap())
}

/// Completes a rank-exhausted trace to `min(budget, N)` items by descending
/// score, lowest index on ties. Other traces are returned unchanged.
pub fn fill_by_score(trace: SelectionTrace, scores: &ScoreVector, budget: usize) -> SelectionTrace {
    if trace.stop_reason != StopReason::RankExhausted {
        return trace;
    }
    let n = scores.len();
    let target = budget.min(n);
    let mut taken = vec![false; n];
    for s in &trace.steps {
        taken[s.index] = true;
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    rest.sort_by(|&a, &b| scores.values[b].total_cmp(&scores.values[a]).then(a.cmp(&b)));

    let cumulative = trace.logdet();
    let mut steps = trace.steps;
    steps.extend(rest.into_iter().take(target.saturating_sub(steps.len())).map(|index| TraceStep {
        index,
        gain: f64::NEG_INFINITY,
        cumulative_logdet: cumulative,
        fallback: true,
    }));
    SelectionTrace {
        steps,
        stop_reason: trace.stop_reason,
    }
}
