#![allow(dead_code)]

use lmdpp::pool_io::{normalize_pool, CandidateItem, CandidatePool};
use lmdpp::ScoreVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Normalized pool of `n` items with i.i.d. Gaussian-ish embeddings and
/// independent uniform scores.
pub fn random_pool(n: usize, dim: usize, seed: u64) -> (CandidatePool, ScoreVector) {
    let mut r = rng(seed);
    let items = (0..n)
        .map(|i| {
            let e: Vec<f64> = (0..dim).map(|_| gaussian(&mut r)).collect();
            CandidateItem::new(format!("id{i:05}"), format!("text {i}")).with_embedding(e)
        })
        .collect();
    let scores = ScoreVector::raw((0..n).map(|_| r.gen::<f64>()).collect());
    (normalize_pool(CandidatePool::new(items).unwrap()).unwrap(), scores)
}

pub fn gaussian(r: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = r.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = r.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Log-determinant by LU (nalgebra), independent of the crate's Cholesky.
pub fn lu_logdet(n: usize, entry: impl Fn(usize, usize) -> f64, subset: &[usize]) -> f64 {
    let k = subset.len();
    if k == 0 {
        return 0.0;
    }
    let m = nalgebra::DMatrix::from_fn(k, k, |a, b| entry(subset[a], subset[b]));
    let _ = n;
    let det = m.determinant();
    if det > 0.0 {
        det.ln()
    } else {
        f64::NEG_INFINITY
    }
}

pub fn min_eigenvalue(n: usize, data: &[f64]) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(n, n, data);
    m.symmetric_eigen().eigenvalues.min()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Random subset of `0..n` of size `1..=max`.
pub fn random_subset(n: usize, max: usize, r: &mut impl Rng) -> Vec<usize> {
    let k = r.gen_range(1..=max.min(n));
    rand::seq::index::sample(r, n, k).into_vec()
}

/// Like [`random_pool`] but with a shared offset on every coordinate, so
/// typical pairwise cosines sit near 0.5 as with sentence encoders rather
/// than near 0.
pub fn anisotropic_pool(n: usize, dim: usize, seed: u64) -> (CandidatePool, ScoreVector) {
    let mut r = rng(seed);
    let items = (0..n)
        .map(|i| {
            let e: Vec<f64> = (0..dim).map(|_| 1.0 + gaussian(&mut r)).collect();
            CandidateItem::new(format!("id{i:05}"), format!("text {i}")).with_embedding(e)
        })
        .collect();
    let scores = ScoreVector::raw((0..n).map(|_| r.gen::<f64>()).collect());
    (normalize_pool(CandidatePool::new(items).unwrap()).unwrap(), scores)
}
