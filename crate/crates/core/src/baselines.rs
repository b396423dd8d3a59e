//! Reference selectors: uniform random, perplexity top-M and k-means.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::pool_io::CandidatePool;
use crate::scoring::ScoreVector;

pub const DEFAULT_KMEANS_ITERS: usize = 100;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `min(budget, n)` distinct indices drawn uniformly without replacement.
pub fn select_random(n: usize, budget: usize, seed: u64) -> Result<Vec<usize>> {
    if budget < 1 {
        return Err(Error::BadBudget);
    }
    let m = budget.min(n);
    Ok(index::sample(&mut rng(seed), n, m).into_vec())
}

/// Indices of the `min(budget, n)` highest scores, lowest index on ties.
pub fn select_perplexity_topk(scores: &ScoreVector, budget: usize) -> Result<Vec<usize>> {
    if budget < 1 {
        return Err(Error::BadBudget);
    }
    let v = &scores.values;
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    order.truncate(budget);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansState {
    /// Row-major `k x dim`.
    pub centroids: Vec<f64>,
    pub dim: usize,
    pub assignments: Vec<usize>,
    pub iterations_run: usize,
    pub seed: u64,
    /// Sum of squared distances after each assignment step.
    pub objective_trace: Vec<f64>,
}

impl KMeansState {
    pub fn k(&self) -> usize {
        self.centroids.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding over row-major `data`.
pub fn kmeans_plus_plus(data: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(k * dim);

    let first = rng.gen_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();

    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            chosen.iter().position(|&c| !c).unwrap()
        };
        chosen[next] = true;
        centroids.extend_from_slice(row(next));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), row(next)));
        }
        d2[next] = 0.0;
    }
    centroids
}

/// Lloyd iterations from the given centroids, until assignments stop
/// changing or `max_iters` updates have run. An empty cluster is re-seeded
/// at the point farthest from its current centroid.
pub fn lloyd(data: &[f64], dim: usize, init: Vec<f64>, max_iters: usize, seed: u64) -> KMeansState {
    let n = data.len() / dim;
    let k = init.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = init;
    let mut assignments: Vec<usize> = Vec::new();
    let mut objective_trace = Vec::new();
    let mut iterations_run = 0;

    loop {
        let assigned = par::map_range(n, |i| nearest(row(i), &centroids, dim));
        objective_trace.push(assigned.iter().map(|a| a.1).sum());
        let next: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let stable = next == assignments;
        assignments = next;
        if stable || iterations_run == max_iters {
            break;
        }

        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &c) in assignments.iter().enumerate() {
            members[c].push(i);
        }
        // Summed per cluster in index order so the result does not depend on
        // how the work is split across threads.
        let means = par::map_range(k, |c| {
            if members[c].is_empty() {
                return None;
            }
            let mut sum = vec![0.0; dim];
            for &i in &members[c] {
                sum.iter_mut().zip(row(i)).for_each(|(s, x)| *s += x);
            }
            let len = members[c].len() as f64;
            sum.iter_mut().for_each(|s| *s /= len);
            Some(sum)
        });
        let mut taken = vec![false; n];
        for (c, mean) in means.into_iter().enumerate() {
            match mean {
                Some(m) => centroids[c * dim..(c + 1) * dim].copy_from_slice(&m),
                None => {
                    let far = (0..n)
                        .filter(|&i| !taken[i])
                        .max_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1).then(b.cmp(&a)));
                    if let Some(i) = far {
                        taken[i] = true;
                        centroids[c * dim..(c + 1) * dim].copy_from_slice(row(i));
                    }
                }
            }
        }
        iterations_run += 1;
    }

    KMeansState {
        centroids,
        dim,
        assignments,
        iterations_run,
        seed,
        objective_trace,
    }
}

/// From each cluster, the member nearest its centroid (lowest index on
/// ties). A cluster left empty contributes the nearest unselected item.
pub fn representatives(data: &[f64], state: &KMeansState) -> Vec<usize> {
    let dim = state.dim;
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(state.k());
    for c in 0..state.k() {
        let centroid = state.centroid(c);
        let pick_from = |filter: &dyn Fn(usize) -> bool| {
            (0..n)
                .filter(|&i| filter(i))
                .map(|i| (i, sq_dist(row(i), centroid)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|a| a.0)
        };
        let pick = pick_from(&|i| state.assignments[i] == c && !taken[i])
            .or_else(|| pick_from(&|i| !taken[i]));
        if let Some(i) = pick {
            taken[i] = true;
            out.push(i);
        }
    }
    out
}

/// k-means++ then Lloyd with `min(budget, N)` clusters over unit embeddings;
/// one representative per cluster.
pub fn select_kmeans(
    pool: &CandidatePool,
    budget: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(Vec<usize>, KMeansState)> {
    if budget < 1 {
        return Err(Error::BadBudget);
    }
    if !pool.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let data = pool.embedding_matrix()?;
    let dim = pool.dim();
    let k = budget.min(pool.len());
    let init = kmeans_plus_plus(&data, dim, k, &mut rng(seed));
    let state = lloyd(&data, dim, init, max_iters, seed);
    Ok((representatives(&data, &state), state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool_io::{normalize_pool, CandidateItem};

    fn pool(rows: &[Vec<f64>]) -> CandidatePool {
        let items = rows
            .iter()
            .enumerate()
            .map(|(i, r)| CandidateItem::new(format!("i{i}"), "t").with_embedding(r.clone()))
            .collect();
        normalize_pool(CandidatePool::new(items).unwrap()).unwrap()
    }

    #[test]
    fn random_is_seeded_and_exhaustive() {
        assert_eq!(select_random(50, 10, 7).unwrap(), select_random(50, 10, 7).unwrap());
        let mut all = select_random(5, 9, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(matches!(select_random(5, 0, 1), Err(Error::BadBudget)));
    }

    #[test]
    fn random_single_draws_are_uniform() {
        // 10 000 draws of one item from four; expected 2 500 each with
        // sigma = sqrt(10 000 * .25 * .75) ~ 43.3.
        let mut counts = [0usize; 4];
        for seed in 0..10_000u64 {
            counts[select_random(4, 1, seed).unwrap()[0]] += 1;
        }
        let sigma = (10_000.0f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 2500.0).abs() <= 25.0 + 3.0 * sigma, "{counts:?}");
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 2500.0).powi(2) / 2500.0).sum();
        // 99.9th percentile of chi-square with 3 degrees of freedom.
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn distinct_seeds_differ() {
        let a = select_random(100, 16, 1).unwrap();
        let b = select_random(100, 16, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn topk_examples() {
        let s = ScoreVector::raw(vec![0.1, 0.9, 0.5]);
        assert_eq!(select_perplexity_topk(&s, 2).unwrap(), vec![1, 2]);
        let s = ScoreVector::raw(vec![0.3; 5]);
        assert_eq!(select_perplexity_topk(&s, 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_perplexity_topk(&s, 9).unwrap().len(), 5);
    }

    #[test]
    fn kmeans_with_k_equal_n_selects_everything() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![(i as f64).cos(), (i as f64).sin()]).collect();
        let (mut sel, _) = select_kmeans(&pool(&rows), 6, 3, 100).unwrap();
        sel.sort();
        assert_eq!(sel, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn kmeans_picks_one_per_blob() {
        let mut rows = vec![vec![1.0, 0.0, 0.0]; 5];
        rows.extend(vec![vec![0.0, 0.0, 1.0]; 5]);
        for seed in 0..20 {
            let (sel, state) = select_kmeans(&pool(&rows), 2, seed, 100).unwrap();
            assert_eq!(sel.len(), 2);
            let groups: Vec<bool> = sel.iter().map(|&i| i < 5).collect();
            assert_ne!(groups[0], groups[1], "seed {seed}: {sel:?}");
            assert!(state.objective_trace.last().unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_objective_never_increases() {
        let mut r = rng(11);
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..5).map(|_| r.gen::<f64>() - 0.5).collect())
            .collect();
        let (sel, state) = select_kmeans(&pool(&rows), 12, 5, 100).unwrap();
        assert_eq!(sel.len(), 12);
        for w in state.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", state.objective_trace);
        }
        assert!(state.assignments.iter().all(|&a| a < state.k()));
    }
}
