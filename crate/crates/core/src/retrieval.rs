//! Test-time demonstration retrieval from the annotated subset.
//!
//! Demonstrations are the cosine top-k of the annotated items, placed in
//! ascending similarity so the most similar one sits directly before the
//! query. When the prompt exceeds the token budget the least similar
//! demonstrations are dropped from the front.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::is_unit;
use crate::pool_io::{CandidateItem, CandidatePool, SelectionManifest};
use crate::template::Template;

pub const DEMO_SEPARATOR: &str = "\n\n";

/// Counts whitespace-separated tokens.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    items: Vec<CandidateItem>,
    pool_indices: Vec<usize>,
    embeddings: Vec<f64>,
    dim: usize,
}

pub fn build_index(pool: &CandidatePool, manifest: &SelectionManifest) -> Result<RetrievalIndex> {
    if !pool.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let lookup: std::collections::HashMap<&str, usize> =
        pool.ids().enumerate().map(|(i, id)| (id, i)).collect();
    let mut items = Vec::with_capacity(manifest.selected_ids.len());
    let mut pool_indices = Vec::with_capacity(items.capacity());
    let mut embeddings = Vec::with_capacity(items.capacity() * pool.dim());
    for id in &manifest.selected_ids {
        let &i = lookup
            .get(id.as_str())
            .ok_or_else(|| Error::UnknownId(id.clone()))?;
        embeddings.extend_from_slice(pool.embedding(i)?);
        items.push(pool.items()[i].clone());
        pool_indices.push(i);
    }
    Ok(RetrievalIndex {
        items,
        pool_indices,
        embeddings,
        dim: pool.dim(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    /// Row in the index (manifest order).
    pub row: usize,
    pub pool_index: usize,
    pub similarity: f64,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.id.as_str())
    }

    pub fn item(&self, row: usize) -> &CandidateItem {
        &self.items[row]
    }

    pub fn embedding(&self, row: usize) -> &[f64] {
        &self.embeddings[row * self.dim..(row + 1) * self.dim]
    }

    /// Cosine similarity of the query to every row, in row order.
    pub fn similarities(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::SizeMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        if !is_unit(query) {
            return Err(Error::NotNormalized);
        }
        Ok((0..self.len())
            .map(|r| self.embedding(r).iter().zip(query).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// The `k` most similar rows, descending, lowest pool index on ties.
    pub fn topk(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        if k < 1 {
            return Err(Error::InvalidParam("k must be at least 1".into()));
        }
        let sims = self.similarities(query)?;
        let mut hits: Vec<Hit> = sims
            .into_iter()
            .enumerate()
            .map(|(row, similarity)| Hit {
                row,
                pool_index: self.pool_indices[row],
                similarity,
            })
            .collect();
        hits.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then(a.pool_index.cmp(&b.pool_index))
        });
        hits.truncate(k);
        Ok(hits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub id: String,
    pub similarity: f64,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptAssembly {
    pub query_id: String,
    /// Ascending similarity; the last demo is adjacent to the query.
    pub demos: Vec<Demo>,
    pub rendered: String,
    pub total_tokens: usize,
    pub truncated: bool,
}

/// Output record of the `retrieve` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub query_id: String,
    pub demo_ids: Vec<String>,
    pub similarities: Vec<f64>,
    pub prompt: String,
    pub truncated: bool,
}

impl PromptAssembly {
    pub fn is_ascending(&self) -> bool {
        self.demos.windows(2).all(|w| w[0].similarity <= w[1].similarity)
    }

    pub fn to_record(&self) -> PromptRecord {
        PromptRecord {
            query_id: self.query_id.clone(),
            demo_ids: self.demos.iter().map(|d| d.id.clone()).collect(),
            similarities: self.demos.iter().map(|d| d.similarity).collect(),
            prompt: self.rendered.clone(),
            truncated: self.truncated,
        }
    }
}

fn render(demos: &[String], query: &str) -> String {
    let mut out = String::new();
    for d in demos {
        out.push_str(d);
        out.push_str(DEMO_SEPARATOR);
    }
    out.push_str(query);
    out
}

pub fn assemble_prompt(
    index: &RetrievalIndex,
    query: &CandidateItem,
    k: usize,
    template: &Template,
    max_tokens: usize,
    tokenizer: &dyn Fn(&str) -> usize,
) -> Result<PromptAssembly> {
    let embedding = query
        .embedding
        .as_deref()
        .ok_or_else(|| Error::MissingEmbedding(query.id.clone()))?;
    let query_text = template.render_input(query);
    if tokenizer(&query_text) > max_tokens {
        return Err(Error::QueryTooLong(query.id.clone()));
    }

    let mut hits = index.topk(embedding, k)?;
    hits.reverse();
    let mut rendered: Vec<String> = hits
        .iter()
        .map(|h| template.render_demo(index.item(h.row)))
        .collect();

    let mut dropped = 0;
    let mut prompt = render(&rendered[dropped..], &query_text);
    while tokenizer(&prompt) > max_tokens {
        dropped += 1;
        prompt = render(&rendered[dropped..], &query_text);
    }
    let kept = rendered.split_off(dropped);
    let demos = hits[dropped..]
        .iter()
        .zip(&kept)
        .map(|(h, text)| Demo {
            id: index.item(h.row).id.clone(),
            similarity: h.similarity,
            token_count: tokenizer(text),
        })
        .collect();
    Ok(PromptAssembly {
        query_id: query.id.clone(),
        demos,
        total_tokens: tokenizer(&prompt),
        rendered: prompt,
        truncated: dropped > 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool_io::{normalize_pool, Method};
    use chrono::{TimeZone, Utc};

    fn unit(angle: f64) -> Vec<f64> {
        vec![angle.cos(), angle.sin()]
    }

    fn fixture() -> (CandidatePool, SelectionManifest) {
        // Similarities to the query at angle 0: 0.9, 0.5, 0.7, and one unselected.
        let rows = [0.9f64.acos(), 0.5f64.acos(), 0.7f64.acos(), 0.0];
        let items = rows
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let mut it = CandidateItem::new(format!("d{i}"), format!("demo number {i}"));
                it.label = Some(format!("L{i}"));
                it.with_embedding(unit(a))
            })
            .collect();
        let pool = normalize_pool(CandidatePool::new(items).unwrap()).unwrap();
        let manifest = SelectionManifest {
            method: Method::Random,
            requested_method: Method::Random,
            budget: 3,
            lambda: 0.0,
            seed: 0,
            pool_size: 4,
            selected_ids: vec!["d0".into(), "d1".into(), "d2".into()],
            gains: vec![0.0; 3],
            cumulative_logdet: None,
            stop_reason: None,
            fallback_count: 0,
            epsilon_reg: None,
            rank_tol: None,
            created_at: Utc.timestamp_opt(0, 0).unwrap(),
        };
        (pool, manifest)
    }

    fn query() -> CandidateItem {
        CandidateItem::new("q", "the query").with_embedding(unit(0.0))
    }

    #[test]
    fn index_follows_manifest() {
        let (pool, m) = fixture();
        let idx = build_index(&pool, &m).unwrap();
        assert_eq!(idx.ids().collect::<Vec<_>>(), ["d0", "d1", "d2"]);
        let mut bad = m.clone();
        bad.selected_ids[1] = "ghost".into();
        assert!(matches!(build_index(&pool, &bad), Err(Error::UnknownId(id)) if id == "ghost"));
    }

    #[test]
    fn topk_self_similarity_and_errors() {
        let (pool, m) = fixture();
        let idx = build_index(&pool, &m).unwrap();
        let hits = idx.topk(idx.embedding(1), 1).unwrap();
        assert_eq!(hits[0].row, 1);
        assert!((hits[0].similarity - 1.0).abs() < 1e-9);
        assert_eq!(idx.topk(&[1.0, 0.0], 10).unwrap().len(), 3);
        assert!(matches!(idx.topk(&[2.0, 0.0], 1), Err(Error::NotNormalized)));
    }

    #[test]
    fn ascending_order_with_ample_budget() {
        let (pool, m) = fixture();
        let idx = build_index(&pool, &m).unwrap();
        let t = Template::default();
        let p = assemble_prompt(&idx, &query(), 3, &t, 1000, &whitespace_tokens).unwrap();
        let sims: Vec<f64> = p.demos.iter().map(|d| (d.similarity * 10.0).round() / 10.0).collect();
        assert_eq!(sims, vec![0.5, 0.7, 0.9]);
        assert!(!p.truncated);
        assert!(p.is_ascending());
        assert!(p.rendered.ends_with("the query\n"));
        assert!(p.rendered.starts_with("demo number 1\nL1"));
        assert_eq!(p.total_tokens, whitespace_tokens(&p.rendered));
    }

    #[test]
    fn budget_drops_least_similar_first() {
        let (pool, m) = fixture();
        let idx = build_index(&pool, &m).unwrap();
        let t = Template::default();
        // Each demo is 4 tokens ("demo number i Li"), the query 2.
        let p = assemble_prompt(&idx, &query(), 3, &t, 10, &whitespace_tokens).unwrap();
        assert_eq!(p.demos.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), ["d2", "d0"]);
        assert!(p.truncated);
        assert_eq!(p.total_tokens, 10);
        assert!(p.demos.iter().all(|d| d.token_count == 4));
    }

    #[test]
    fn single_demo_and_query_too_long() {
        let (pool, m) = fixture();
        let idx = build_index(&pool, &m).unwrap();
        let t = Template::default();
        let p = assemble_prompt(&idx, &query(), 1, &t, 100, &whitespace_tokens).unwrap();
        assert_eq!(p.demos.len(), 1);
        assert_eq!(p.demos[0].id, "d0");
        assert_eq!(p.rendered, "demo number 0\nL0\n\nthe query\n");
        assert!(matches!(
            assemble_prompt(&idx, &query(), 1, &t, 1, &whitespace_tokens),
            Err(Error::QueryTooLong(_))
        ));
        let bare = CandidateItem::new("x", "y");
        assert!(matches!(
            assemble_prompt(&idx, &bare, 1, &t, 100, &whitespace_tokens),
            Err(Error::MissingEmbedding(_))
        ));
    }
}
