//! The conditional DPP kernel.
//!
//! With unit embeddings `phi_i`, scores `r_i` and a trade-off `lambda`, the
//! kernel is `L'_ij = exp(alpha r_i) <phi_i, phi_j> exp(alpha r_j)` where
//! `alpha = lambda / (2 (1 - lambda))`. For any subset `S`,
//!
//! ```text
//! log det L'_S = 2 alpha sum_{i in S} r_i + log det sim_S
//! ```
//!
//! so `lambda` trades per-item quality against the diversity term.
//!
//! Entries are computed with a fixed `(min(i, j), max(i, j))` operand order,
//! which makes every matrix exactly symmetric and makes the dense and lazy
//! kernels agree bit for bit.

use crate::error::{Error, Result};
use crate::par;
use crate::pool_io::{CandidatePool, UNIT_NORM_TOL};
use crate::scoring::ScoreVector;

pub const DEFAULT_EPSILON_REG: f64 = 1e-6;

/// Above this pool size `KernelMode::Auto` stops materialising `N x N`.
pub const DENSE_LIMIT: usize = 4096;

pub fn lambda_to_alpha(lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaRange(lambda));
    }
    if lambda == 1.0 {
        return Err(Error::LambdaSingular);
    }
    Ok(lambda / (2.0 * (1.0 - lambda)))
}

/// Read access to kernel entries, whether stored or computed on demand.
pub trait KernelRows: Sync {
    fn size(&self) -> usize;
    fn entry(&self, i: usize, j: usize) -> f64;
    fn diag(&self, i: usize) -> f64 {
        self.entry(i, i)
    }
}

/// Four independent partial sums; fixed order, so results are reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0f64; 4];
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-major `N x D` unit embeddings with the regularised cosine
/// similarity `dot(phi_i, phi_j) + eps [i == j]`.
#[derive(Debug, Clone)]
struct Embeddings {
    data: Vec<f64>,
    dim: usize,
    epsilon_reg: f64,
}

impl Embeddings {
    fn from_pool(pool: &CandidatePool, epsilon_reg: f64) -> Result<Self> {
        if !pool.is_normalized() {
            return Err(Error::NotNormalized);
        }
        if !(epsilon_reg.is_finite() && epsilon_reg >= 0.0) {
            return Err(Error::InvalidParam(format!("epsilon_reg {epsilon_reg}")));
        }
        Ok(Embeddings {
            data: pool.embedding_matrix()?,
            dim: pool.dim(),
            epsilon_reg,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    fn sim(&self, i: usize, j: usize) -> f64 {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        let s = dot(self.row(lo), self.row(hi));
        if i == j {
            s + self.epsilon_reg
        } else {
            s
        }
    }
}

#[inline]
fn weighted(w: &[f64], s: f64, i: usize, j: usize) -> f64 {
    let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
    w[lo] * s * w[hi]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
    epsilon_reg: f64,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn epsilon_reg(&self) -> f64 {
        self.epsilon_reg
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Dense regularised cosine similarities, built row-parallel.
pub fn build_similarity(pool: &CandidatePool, epsilon_reg: f64) -> Result<SimilarityMatrix> {
    let emb = Embeddings::from_pool(pool, epsilon_reg)?;
    let n = pool.len();
    let mut data = vec![0.0; n * n];
    par::for_each_row(&mut data, n, |i, row| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = emb.sim(i, j);
        }
    });
    Ok(SimilarityMatrix {
        n,
        data,
        epsilon_reg,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalKernel {
    n: usize,
    matrix: Vec<f64>,
    lambda: f64,
    alpha: f64,
    epsilon_reg: f64,
    source_dims: (usize, usize),
}

impl ConditionalKernel {
    /// A kernel over an explicit symmetric matrix, mainly for tests and
    /// oracle harnesses. `lambda` and `alpha` are recorded as zero.
    pub fn from_matrix(n: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != n * n {
            return Err(Error::SizeMismatch {
                expected: n * n,
                got: matrix.len(),
            });
        }
        for i in 0..n {
            for j in 0..i {
                if (matrix[i * n + j] - matrix[j * n + i]).abs() > 1e-12 {
                    return Err(Error::InvalidParam(format!("kernel not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(ConditionalKernel {
            n,
            matrix,
            lambda: 0.0,
            alpha: 0.0,
            epsilon_reg: 0.0,
            source_dims: (n, 0),
        })
    }

    /// The vanilla DPP kernel: the similarity matrix itself.
    pub fn from_similarity(sim: &SimilarityMatrix) -> Self {
        ConditionalKernel {
            n: sim.n,
            matrix: sim.data.clone(),
            lambda: 0.0,
            alpha: 0.0,
            epsilon_reg: sim.epsilon_reg,
            source_dims: (sim.n, 0),
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epsilon_reg(&self) -> f64 {
        self.epsilon_reg
    }

    pub fn source_dims(&self) -> (usize, usize) {
        self.source_dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.matrix
    }
}

impl KernelRows for ConditionalKernel {
    fn size(&self) -> usize {
        self.n
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n + j]
    }
}

fn kernel_weights(scores: &ScoreVector, alpha: f64) -> Result<Vec<f64>> {
    scores
        .values
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let w = (alpha * r).exp();
            if w.is_finite() && w > 0.0 {
                Ok(w)
            } else {
                Err(Error::InvalidScore {
                    id: format!("#{i}"),
                    value: r,
                })
            }
        })
        .collect()
}

pub fn build_conditional_kernel(
    sim: &SimilarityMatrix,
    scores: &ScoreVector,
    lambda: f64,
) -> Result<ConditionalKernel> {
    if scores.len() != sim.n {
        return Err(Error::SizeMismatch {
            expected: sim.n,
            got: scores.len(),
        });
    }
    let alpha = lambda_to_alpha(lambda)?;
    let w = kernel_weights(scores, alpha)?;
    let n = sim.n;
    let mut matrix = vec![0.0; n * n];
    par::for_each_row(&mut matrix, n, |i, row| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = weighted(&w, sim.get(i, j), i, j);
        }
    });
    Ok(ConditionalKernel {
        n,
        matrix,
        lambda,
        alpha,
        epsilon_reg: sim.epsilon_reg,
        source_dims: (n, 0),
    })
}

/// The same kernel as [`build_conditional_kernel`], with entries computed
/// from embeddings on demand. Memory is `O(N D)` instead of `O(N^2)`.
#[derive(Debug, Clone)]
pub struct LazyKernel {
    emb: Embeddings,
    weights: Vec<f64>,
    lambda: f64,
    alpha: f64,
}

impl LazyKernel {
    /// `scores = None` gives the vanilla (unweighted) kernel.
    pub fn new(
        pool: &CandidatePool,
        scores: Option<&ScoreVector>,
        lambda: f64,
        epsilon_reg: f64,
    ) -> Result<Self> {
        let emb = Embeddings::from_pool(pool, epsilon_reg)?;
        let alpha = lambda_to_alpha(lambda)?;
        let weights = match scores {
            Some(s) if s.len() != pool.len() => {
                return Err(Error::SizeMismatch {
                    expected: pool.len(),
                    got: s.len(),
                })
            }
            Some(s) => kernel_weights(s, alpha)?,
            None => vec![1.0; pool.len()],
        };
        Ok(LazyKernel {
            emb,
            weights,
            lambda,
            alpha,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Materialises the dense kernel.
    pub fn to_dense(&self) -> ConditionalKernel {
        let n = self.size();
        let mut matrix = vec![0.0; n * n];
        par::for_each_row(&mut matrix, n, |i, row| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.entry(i, j);
            }
        });
        ConditionalKernel {
            n,
            matrix,
            lambda: self.lambda,
            alpha: self.alpha,
            epsilon_reg: self.emb.epsilon_reg,
            source_dims: (n, self.emb.dim),
        }
    }
}

impl KernelRows for LazyKernel {
    fn size(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        weighted(&self.weights, self.emb.sim(i, j), i, j)
    }
}

/// Whether selection materialises the `N x N` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelMode {
    /// Dense up to [`DENSE_LIMIT`] items, lazy beyond.
    #[default]
    Auto,
    Dense,
    Lazy,
}

impl KernelMode {
    pub fn use_dense(self, n: usize) -> bool {
        match self {
            KernelMode::Auto => n <= DENSE_LIMIT,
            KernelMode::Dense => true,
            KernelMode::Lazy => false,
        }
    }
}

/// Checks that every row of `embeddings` is unit norm.
pub fn is_unit(v: &[f64]) -> bool {
    (dot(v, v).sqrt() - 1.0).abs() <= UNIT_NORM_TOL
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool_io::{normalize_pool, CandidateItem};

    fn pool(rows: &[&[f64]]) -> CandidatePool {
        let items = rows
            .iter()
            .enumerate()
            .map(|(i, r)| CandidateItem::new(format!("i{i}"), "t").with_embedding(r.to_vec()))
            .collect();
        normalize_pool(CandidatePool::new(items).unwrap()).unwrap()
    }

    #[test]
    fn alpha_mapping() {
        assert_eq!(lambda_to_alpha(0.0).unwrap(), 0.0);
        assert_eq!(lambda_to_alpha(0.5).unwrap(), 0.5);
        assert!((lambda_to_alpha(0.6).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(lambda_to_alpha(1.0), Err(Error::LambdaSingular)));
        assert!(matches!(lambda_to_alpha(-0.1), Err(Error::LambdaRange(_))));
        assert!(matches!(lambda_to_alpha(1.5), Err(Error::LambdaRange(_))));
    }

    #[test]
    fn similarity_examples() {
        let s = build_similarity(&pool(&[&[1.0, 0.0], &[1.0, 0.0]]), 0.0).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 1.0, 1.0, 1.0]);
        let s = build_similarity(&pool(&[&[1.0, 0.0], &[0.0, 1.0]]), 0.0).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        let s = build_similarity(&pool(&[&[1.0, 0.0], &[0.6, 0.8]]), 0.0).unwrap();
        assert!((s.get(0, 1) - 0.6).abs() < 1e-15);
        assert_eq!(s.get(0, 1), s.get(1, 0));
        let s = build_similarity(&pool(&[&[1.0, 0.0], &[0.6, 0.8]]), 1e-6).unwrap();
        assert!((s.get(1, 1) - (1.0 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn similarity_needs_normalized_pool() {
        let raw = CandidatePool::new(vec![CandidateItem::new("a", "t").with_embedding(vec![2.0, 0.0])]).unwrap();
        assert!(matches!(build_similarity(&raw, 0.0), Err(Error::NotNormalized)));
    }

    #[test]
    fn conditional_kernel_examples() {
        let sim = build_similarity(&pool(&[&[1.0, 0.0], &[0.0, 1.0]]), 0.0).unwrap();
        let k = build_conditional_kernel(&sim, &ScoreVector::raw(vec![0.0, 1.0]), 0.5).unwrap();
        assert_eq!(k.entry(0, 0), 1.0);
        assert!((k.entry(1, 1) - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(k.entry(0, 1), 0.0);

        let sim = build_similarity(&pool(&[&[1.0, 0.0], &[0.6, 0.8], &[0.0, 1.0]]), 1e-6).unwrap();
        let k = build_conditional_kernel(&sim, &ScoreVector::raw(vec![0.3, 0.9, 0.1]), 0.0).unwrap();
        assert_eq!(k.as_slice(), sim.as_slice());

        assert!(matches!(
            build_conditional_kernel(&sim, &ScoreVector::raw(vec![0.3]), 0.5),
            Err(Error::SizeMismatch { .. })
        ));
        assert!(matches!(
            build_conditional_kernel(&sim, &ScoreVector::raw(vec![0.3, 0.9, 0.1]), 1.0),
            Err(Error::LambdaSingular)
        ));
    }

    #[test]
    fn lazy_matches_dense_bitwise() {
        let p = pool(&[&[1.0, 0.2, 0.1], &[0.6, 0.8, 0.3], &[0.0, 1.0, -0.5], &[0.3, -0.2, 0.9]]);
        let scores = ScoreVector::raw(vec![0.3, 0.9, 0.1, 0.5]);
        let sim = build_similarity(&p, 1e-6).unwrap();
        let dense = build_conditional_kernel(&sim, &scores, 0.7).unwrap();
        let lazy = LazyKernel::new(&p, Some(&scores), 0.7, 1e-6).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(dense.entry(i, j).to_bits(), lazy.entry(i, j).to_bits());
                assert_eq!(dense.entry(i, j).to_bits(), dense.entry(j, i).to_bits());
            }
        }
    }

    #[test]
    fn kernel_mode_threshold() {
        assert!(KernelMode::Auto.use_dense(DENSE_LIMIT));
        assert!(!KernelMode::Auto.use_dense(DENSE_LIMIT + 1));
        assert!(KernelMode::Dense.use_dense(1 << 20));
        assert!(!KernelMode::Lazy.use_dense(2));
    }
}
