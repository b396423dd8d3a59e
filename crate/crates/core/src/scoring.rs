//! Reciprocal-perplexity uncertainty scores.
//!
//! A candidate's score is `r = exp(mean_t log p_t)`, the geometric mean of
//! its per-token probabilities, so `r` lies in `(0, 1]` and larger means the
//! scoring model finds the text less surprising.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::pool_io::CandidatePool;
use crate::template::Template;

/// Anything that can return per-token natural-log probabilities for a text.
pub trait Scorer: Sync {
    fn score_logprobs(&self, text: &str) -> std::result::Result<Vec<f64>, String>;
}

pub fn spell_score(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut sum = 0.0;
    for (i, &lp) in token_logprobs.iter().enumerate() {
        if !lp.is_finite() || lp > 0.0 {
            return Err(Error::InvalidLogProb(i));
        }
        sum += lp;
    }
    Ok((sum / token_logprobs.len() as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Raw,
    #[default]
    Minmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    LowUncertainty,
    HighUncertainty,
}

/// Per-item scores aligned to pool order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub mode: ScoreMode,
    pub direction: Direction,
}

impl ScoreVector {
    pub fn raw(values: Vec<f64>) -> Self {
        ScoreVector {
            values,
            mode: ScoreMode::Raw,
            direction: Direction::LowUncertainty,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Maps raw scores into the form used for kernel weighting.
///
/// `HighUncertainty` negates first, so the most perplexing item ends up with
/// the largest value. `Minmax` then rescales affinely onto `[0, 1]`; a
/// constant vector maps to all `0.5`.
pub fn transform_scores(scores: &ScoreVector, mode: ScoreMode, direction: Direction) -> ScoreVector {
    let mut values = scores.values.clone();
    if direction == Direction::HighUncertainty {
        values.iter_mut().for_each(|v| *v = -*v);
    }
    if mode == ScoreMode::Minmax && !values.is_empty() {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if span > 0.0 {
            values.iter_mut().for_each(|v| *v = (*v - lo) / span);
        } else {
            values.iter_mut().for_each(|v| *v = 0.5);
        }
    }
    ScoreVector {
        values,
        mode,
        direction,
    }
}

/// Scores every item's rendered input with `scorer`. Runs in parallel.
pub fn score_pool(pool: &CandidatePool, scorer: &dyn Scorer, template: &Template) -> Result<ScoreVector> {
    let items = pool.items();
    let results = par::map_range(items.len(), |i| {
        let item = &items[i];
        let text = template.render_input(item);
        scorer
            .score_logprobs(&text)
            .and_then(|lp| spell_score(&lp).map_err(|e| e.to_string()))
            .map_err(|cause| Error::ScorerError {
                id: item.id.clone(),
                cause,
            })
    });
    let values = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ScoreVector::raw(values))
}

/// Raw scores carried in the pool itself: `score_r` when present, otherwise
/// the reciprocal perplexity of `token_logprobs`.
pub fn scores_from_pool(pool: &CandidatePool) -> Result<ScoreVector> {
    let mut values = Vec::with_capacity(pool.len());
    for item in pool.items() {
        let r = match (&item.score_r, &item.token_logprobs) {
            (Some(r), _) => *r,
            (None, Some(lp)) => spell_score(lp).map_err(|e| Error::ScorerError {
                id: item.id.clone(),
                cause: e.to_string(),
            })?,
            (None, None) => {
                return Err(Error::ScorerError {
                    id: item.id.clone(),
                    cause: "no score_r or token_logprobs".into(),
                })
            }
        };
        values.push(r);
    }
    Ok(ScoreVector::raw(values))
}

/// Sentinel for "before the start of the text" in n-gram contexts.
const BOS: u32 = u32::MAX;

#[derive(Debug, Clone, Default)]
struct NextCounts {
    next: HashMap<u32, u64>,
    total: u64,
}

/// Character-level n-gram model with add-alpha smoothing.
///
/// The vocabulary is every character seen during fitting plus one unknown
/// symbol, so every character gets non-zero probability in every context.
#[derive(Debug, Clone)]
pub struct NGramScorer {
    order: usize,
    alpha: f64,
    vocab: HashMap<char, u32>,
    unk: u32,
    counts: HashMap<Vec<u32>, NextCounts>,
}

pub fn fit_ngram<S: AsRef<str>>(corpus: &[S], order: usize, alpha: f64) -> Result<NGramScorer> {
    if corpus.is_empty() || corpus.iter().all(|s| s.as_ref().is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    if order == 0 {
        return Err(Error::InvalidParam("n-gram order must be >= 1".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidParam(format!("smoothing alpha {alpha} must be > 0")));
    }

    let mut chars: Vec<char> = corpus.iter().flat_map(|s| s.as_ref().chars()).collect();
    chars.sort_unstable();
    chars.dedup();
    let vocab: HashMap<char, u32> = chars.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
    let unk = vocab.len() as u32;

    let mut model = NGramScorer {
        order,
        alpha,
        vocab,
        unk,
        counts: HashMap::new(),
    };
    for text in corpus {
        let symbols = model.encode(text.as_ref());
        for t in 0..symbols.len() {
            let ctx = model.context(&symbols, t);
            let entry = model.counts.entry(ctx).or_default();
            *entry.next.entry(symbols[t]).or_default() += 1;
            entry.total += 1;
        }
    }
    Ok(model)
}

impl NGramScorer {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of predictable symbols, including the unknown symbol.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + 1
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        text.chars()
            .map(|c| self.vocab.get(&c).copied().unwrap_or(self.unk))
            .collect()
    }

    fn context(&self, symbols: &[u32], t: usize) -> Vec<u32> {
        let width = self.order - 1;
        (0..width)
            .map(|k| {
                let back = width - k;
                if t >= back {
                    symbols[t - back]
                } else {
                    BOS
                }
            })
            .collect()
    }

    fn prob_symbol(&self, ctx: &[u32], symbol: u32) -> f64 {
        let v = self.vocab_size() as f64;
        match self.counts.get(ctx) {
            Some(c) => {
                let n = c.next.get(&symbol).copied().unwrap_or(0) as f64;
                (n + self.alpha) / (c.total as f64 + self.alpha * v)
            }
            None => 1.0 / v,
        }
    }

    /// `P(next | preceding text)`, using only the last `order - 1` characters.
    pub fn prob(&self, preceding: &str, next: char) -> f64 {
        let mut symbols = self.encode(preceding);
        let t = symbols.len();
        symbols.push(self.vocab.get(&next).copied().unwrap_or(self.unk));
        let ctx = self.context(&symbols, t);
        self.prob_symbol(&ctx, symbols[t])
    }

    /// The full conditional distribution after `preceding`, indexed by symbol
    /// id; the last entry is the unknown symbol.
    pub fn distribution(&self, preceding: &str) -> Vec<f64> {
        let mut symbols = self.encode(preceding);
        let t = symbols.len();
        symbols.push(0);
        let ctx = self.context(&symbols, t);
        (0..self.vocab_size() as u32)
            .map(|s| self.prob_symbol(&ctx, s))
            .collect()
    }
}

impl Scorer for NGramScorer {
    fn score_logprobs(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
        let symbols = self.encode(text);
        Ok((0..symbols.len())
            .map(|t| self.prob_symbol(&self.context(&symbols, t), symbols[t]).ln())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool_io::CandidateItem;
    use proptest::prelude::*;

    #[test]
    fn spell_examples() {
        let q = 0.25f64.ln();
        assert_eq!(spell_score(&[q, q, q, q]).unwrap(), 0.25);
        assert_eq!(spell_score(&[0.0]).unwrap(), 1.0);
        let r = spell_score(&[0.5f64.ln(), 0.125f64.ln()]).unwrap();
        assert!((r - 0.25).abs() < 1e-15);
    }

    #[test]
    fn spell_errors() {
        assert!(matches!(spell_score(&[]), Err(Error::EmptySequence)));
        assert!(matches!(spell_score(&[-1.0, 0.1]), Err(Error::InvalidLogProb(1))));
        assert!(matches!(spell_score(&[f64::NAN]), Err(Error::InvalidLogProb(0))));
        assert!(matches!(
            spell_score(&[-1.0, f64::NEG_INFINITY]),
            Err(Error::InvalidLogProb(1))
        ));
    }

    proptest! {
        #[test]
        fn spell_is_reciprocal_perplexity(lp in prop::collection::vec(-20.0f64..=0.0, 1..64)) {
            let r = spell_score(&lp).unwrap();
            let ppl = (-lp.iter().sum::<f64>() / lp.len() as f64).exp();
            prop_assert!((r * ppl - 1.0).abs() <= 1e-12);
            prop_assert!(r > 0.0 && r <= 1.0);
        }

        #[test]
        fn spell_is_permutation_invariant(lp in prop::collection::vec(-10.0f64..=0.0, 1..32)) {
            let mut rev = lp.clone();
            rev.reverse();
            let a = spell_score(&lp).unwrap();
            let b = spell_score(&rev).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn appending_the_mean_keeps_the_score(lp in prop::collection::vec(-10.0f64..=0.0, 1..32)) {
            let mean = lp.iter().sum::<f64>() / lp.len() as f64;
            let mut ext = lp.clone();
            ext.push(mean);
            prop_assert!((spell_score(&lp).unwrap() - spell_score(&ext).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn transform_examples() {
        let r = ScoreVector::raw(vec![0.2, 0.4, 0.6]);
        let t = transform_scores(&r, ScoreMode::Minmax, Direction::LowUncertainty);
        for (a, b) in t.values.iter().zip([0.0, 0.5, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let c = transform_scores(&ScoreVector::raw(vec![0.3, 0.3]), ScoreMode::Minmax, Direction::LowUncertainty);
        assert_eq!(c.values, vec![0.5, 0.5]);
        let h = transform_scores(&ScoreVector::raw(vec![0.2, 0.6]), ScoreMode::Minmax, Direction::HighUncertainty);
        assert_eq!(h.values, vec![1.0, 0.0]);
        let id = transform_scores(&r, ScoreMode::Raw, Direction::LowUncertainty);
        assert_eq!(id, r);
    }

    #[test]
    fn ngram_single_symbol_corpus() {
        let m = fit_ngram(&["aaaa"], 1, 0.01).unwrap();
        assert_eq!(m.vocab_size(), 2);
        // (4 + 0.01) / (4 + 0.02)
        let p = m.prob("", 'a');
        assert!((p - 4.01 / 4.02).abs() < 1e-15);
        let r = spell_score(&m.score_logprobs("aaaa").unwrap()).unwrap();
        assert!((r - 4.01 / 4.02).abs() < 1e-12);
        assert!(r > 0.99);
    }

    #[test]
    fn ngram_distributions_sum_to_one() {
        let m = fit_ngram(&["the cat sat on the mat", "a dog ran"], 3, 1.0).unwrap();
        for ctx in ["", "t", "th", "the c", "zq", "dog r"] {
            let s: f64 = m.distribution(ctx).iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "{ctx:?}: {s}");
        }
        let p = m.prob("th", '\u{1F600}');
        assert!(p > 0.0);
        assert!(matches!(fit_ngram::<&str>(&[], 3, 1.0), Err(Error::EmptyCorpus)));
        assert!(matches!(fit_ngram(&["a"], 0, 1.0), Err(Error::InvalidParam(_))));
        assert!(matches!(fit_ngram(&["a"], 2, 0.0), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn regular_text_scores_higher() {
        let regular = "abcabcabcabcabcabcabcabc";
        let noisy = "qzjxkvwmpfhgbtyrlcnduoei";
        let m = fit_ngram(&[regular, noisy], 3, 1.0).unwrap();
        let r1 = spell_score(&m.score_logprobs(regular).unwrap()).unwrap();
        let r2 = spell_score(&m.score_logprobs(noisy).unwrap()).unwrap();
        assert!(r1 > r2, "{r1} vs {r2}");
    }

    #[test]
    fn score_pool_alignment_and_range() {
        let items = vec![
            CandidateItem::new("a", "same text"),
            CandidateItem::new("b", "same text"),
            CandidateItem::new("c", "different words here"),
        ];
        let pool = CandidatePool::new(items).unwrap();
        let texts: Vec<&str> = pool.items().iter().map(|i| i.text.as_str()).collect();
        let m = fit_ngram(&texts, 3, 1.0).unwrap();
        let s = score_pool(&pool, &m, &Template::default()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.values[0], s.values[1]);
        assert!(s.values.iter().all(|&r| r > 0.0 && r <= 1.0));
    }

    #[test]
    fn score_pool_reports_failing_id() {
        struct Failing;
        impl Scorer for Failing {
            fn score_logprobs(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
                if text.contains("bad") {
                    Err("boom".into())
                } else {
                    Ok(vec![-1.0])
                }
            }
        }
        let pool = CandidatePool::new(vec![
            CandidateItem::new("ok", "fine"),
            CandidateItem::new("broken", "bad"),
        ])
        .unwrap();
        match score_pool(&pool, &Failing, &Template::default()) {
            Err(Error::ScorerError { id, .. }) => assert_eq!(id, "broken"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pool_scores_prefer_explicit_score() {
        let mut a = CandidateItem::new("a", "x");
        a.score_r = Some(0.7);
        a.token_logprobs = Some(vec![-5.0]);
        let mut b = CandidateItem::new("b", "y");
        b.token_logprobs = Some(vec![0.5f64.ln(), 0.125f64.ln()]);
        let pool = CandidatePool::new(vec![a, b]).unwrap();
        let s = scores_from_pool(&pool).unwrap();
        assert_eq!(s.values[0], 0.7);
        assert!((s.values[1] - 0.25).abs() < 1e-15);

        let pool = CandidatePool::new(vec![CandidateItem::new("c", "z")]).unwrap();
        assert!(matches!(scores_from_pool(&pool), Err(Error::ScorerError { .. })));
    }
}
