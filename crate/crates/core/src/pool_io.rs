//! Candidate pools, embedding sidecars and selection manifests.
//!
//! A pool is a JSONL file with one record per candidate. Embeddings are
//! either inline JSON arrays or stored in a binary sidecar:
//!
//! ```text
//! b"DPPE" | u32 N | u32 D | N*D f32   (all little-endian, row-major)
//! ```
//!
//! Row `i` of the sidecar belongs to the `i`-th JSONL record.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map_greedy::StopReason;

pub const SIDECAR_MAGIC: &[u8; 4] = b"DPPE";

/// Tolerance on unit norm for embeddings treated as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateItem {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_r: Option<f64>,
}

impl CandidateItem {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        CandidateItem {
            id: id.into(),
            text: text.into(),
            label: None,
            embedding: None,
            token_logprobs: None,
            score_r: None,
        }
    }

    pub fn with_embedding(mut self, embedding: Vec<f64>) -> Self {
        self.embedding = Some(embedding);
        self
    }

    fn validate(&self) -> Result<()> {
        if let Some(e) = &self.embedding {
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteEmbedding(self.id.clone()));
            }
        }
        if let Some(lp) = &self.token_logprobs {
            if let Some(i) = lp.iter().position(|v| !v.is_finite() || *v > 0.0) {
                return Err(Error::InvalidScore {
                    id: self.id.clone(),
                    value: lp[i],
                });
            }
        }
        if let Some(r) = self.score_r {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::InvalidScore {
                    id: self.id.clone(),
                    value: r,
                });
            }
        }
        Ok(())
    }
}

/// An ordered set of candidates. Ingestion order is the index order used by
/// every downstream module, including for tie-breaking.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    items: Vec<CandidateItem>,
    dim: usize,
    normalized: bool,
}

impl CandidatePool {
    /// Validates ids, embedding dimensions and per-item fields.
    ///
    /// Items without an embedding are allowed here; operations that need
    /// embeddings report [`Error::MissingEmbedding`].
    pub fn new(items: Vec<CandidateItem>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(items.len());
        let mut dim = None;
        for item in &items {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::DuplicateId(item.id.clone()));
            }
            if let Some(e) = &item.embedding {
                match dim {
                    None => dim = Some(e.len()),
                    Some(d) if d != e.len() => {
                        return Err(Error::DimMismatch {
                            expected: d,
                            got: e.len(),
                            id: item.id.clone(),
                        })
                    }
                    _ => {}
                }
            }
            item.validate()?;
        }
        Ok(CandidatePool {
            items,
            dim: dim.unwrap_or(0),
            normalized: false,
        })
    }

    pub fn items(&self) -> &[CandidateItem] {
        &self.items
    }

    pub fn into_items(self) -> Vec<CandidateItem> {
        self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.id.as_str())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.id == id)
    }

    pub fn embedding(&self, index: usize) -> Result<&[f64]> {
        let item = &self.items[index];
        item.embedding
            .as_deref()
            .ok_or_else(|| Error::MissingEmbedding(item.id.clone()))
    }

    /// Embeddings as one row-major `N x D` buffer.
    pub fn embedding_matrix(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.len() * self.dim);
        for i in 0..self.len() {
            out.extend_from_slice(self.embedding(i)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PoolFormat {
    /// Embeddings inline in each record (or absent).
    Jsonl,
    /// Embeddings in a binary sidecar at the given path.
    JsonlWithSidecar(PathBuf),
}

pub fn load_pool(path: impl AsRef<Path>, format: &PoolFormat) -> Result<CandidatePool> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: CandidateItem =
            serde_json::from_str(&line).map_err(|e| Error::InvalidRecord {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
        items.push(item);
    }

    if let PoolFormat::JsonlWithSidecar(sidecar) = format {
        let (rows, dim, data) = read_sidecar(sidecar)?;
        if rows != items.len() {
            return Err(Error::SidecarFormat {
                path: sidecar.clone(),
                message: format!("{rows} rows for {} records", items.len()),
            });
        }
        for (i, item) in items.iter_mut().enumerate() {
            if item.embedding.is_some() {
                return Err(Error::InvalidRecord {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "inline embedding conflicts with sidecar".into(),
                });
            }
            let row = &data[i * dim..(i + 1) * dim];
            item.embedding = Some(row.iter().map(|&v| f64::from(v)).collect());
        }
    }
    CandidatePool::new(items)
}

/// Writes the pool as JSONL. With a sidecar format, embeddings are stored as
/// f32 in the sidecar, which is exact for embeddings that were loaded from a
/// sidecar in the first place.
pub fn save_pool(pool: &CandidatePool, path: impl AsRef<Path>, format: &PoolFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let sidecar = matches!(format, PoolFormat::JsonlWithSidecar(_));
    for item in pool.items() {
        let line = if sidecar {
            let stripped = CandidateItem {
                embedding: None,
                ..item.clone()
            };
            serde_json::to_string(&stripped)
        } else {
            serde_json::to_string(item)
        }
        .expect("candidate records always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    if let PoolFormat::JsonlWithSidecar(sc) = format {
        let matrix: Vec<f32> = pool.embedding_matrix()?.iter().map(|&v| v as f32).collect();
        write_sidecar(sc, pool.len(), pool.dim(), &matrix)?;
    }
    Ok(())
}

pub fn write_sidecar(path: impl AsRef<Path>, rows: usize, dim: usize, data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(data.len(), rows * dim);
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| Error::InvalidParam(format!("sidecar size {v} exceeds u32")))
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(12);
    header.extend_from_slice(SIDECAR_MAGIC);
    header.extend_from_slice(&to_u32(rows)?.to_le_bytes());
    header.extend_from_slice(&to_u32(dim)?.to_le_bytes());
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let bad = |message: String| Error::SidecarFormat {
        path: path.to_path_buf(),
        message,
    };
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != SIDECAR_MAGIC {
        return Err(bad("missing DPPE header".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (rows, dim) = (word(4), word(8));
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("header size overflow".into()))?;
    if bytes.len() - 12 != expected {
        return Err(bad(format!(
            "expected {expected} payload bytes for {rows}x{dim}, found {}",
            bytes.len() - 12
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, dim, data))
}

/// Scales every embedding to unit Euclidean norm. Idempotent.
pub fn normalize_pool(pool: CandidatePool) -> Result<CandidatePool> {
    let CandidatePool { mut items, dim, .. } = pool;
    for item in &mut items {
        let e = item
            .embedding
            .as_mut()
            .ok_or_else(|| Error::MissingEmbedding(item.id.clone()))?;
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroEmbedding(item.id.clone()));
        }
        // Leave unit vectors untouched so repeated calls are exact no-ops.
        if (norm - 1.0).abs() > f64::EPSILON * 4.0 {
            e.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(CandidatePool {
        items,
        dim,
        normalized: true,
    })
}

/// Deterministic stand-in encoder: hashed character trigrams folded into
/// `dim` buckets, then unit-normalized. Used by tests and demos only.
pub fn toy_embed(text: &str, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(Error::InvalidParam(format!("toy_embed dim {dim} < 2")));
    }
    if text.is_empty() {
        return Err(Error::EmptyText);
    }
    let chars: Vec<char> = std::iter::once('\u{2}')
        .chain(text.chars())
        .chain(std::iter::once('\u{3}'))
        .collect();
    let mut v = vec![0.0; dim];
    let mut buf = [0u8; 12];
    for w in chars.windows(3) {
        let mut len = 0;
        for c in w {
            len += c.encode_utf8(&mut buf[len..]).len();
        }
        v[(fnv1a(&buf[..len]) % dim as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    LmDpp,
    VanillaDpp,
    #[serde(alias = "perplexity")]
    PerplexityTopk,
    Random,
    Kmeans,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::LmDpp => "lm_dpp",
            Method::VanillaDpp => "vanilla_dpp",
            Method::PerplexityTopk => "perplexity_topk",
            Method::Random => "random",
            Method::Kmeans => "kmeans",
        }
    }

    pub fn needs_scores(self) -> bool {
        matches!(self, Method::LmDpp | Method::PerplexityTopk)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    /// Method that actually produced the selection (after lambda routing).
    pub method: Method,
    /// Method the caller asked for.
    pub requested_method: Method,
    pub budget: usize,
    pub lambda: f64,
    pub seed: u64,
    pub pool_size: usize,
    pub selected_ids: Vec<String>,
    /// One entry per selection step; `-inf` (written as `null`) marks
    /// steps filled by score after rank exhaustion.
    #[serde(with = "nullable_f64s")]
    pub gains: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cumulative_logdet: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
    #[serde(default)]
    pub fallback_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_reg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_tol: Option<f64>,
    pub created_at: DateTime<Utc>,
}

impl SelectionManifest {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidManifest("budget is zero".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidManifest(format!("lambda {}", self.lambda)));
        }
        let mut seen = HashSet::new();
        for id in &self.selected_ids {
            if !seen.insert(id) {
                return Err(Error::InvalidManifest(format!("duplicate id {id:?}")));
            }
        }
        if self.selected_ids.len() != self.budget.min(self.pool_size) {
            return Err(Error::InvalidManifest(format!(
                "{} ids for budget {} over {} items",
                self.selected_ids.len(),
                self.budget,
                self.pool_size
            )));
        }
        if self.gains.len() != self.selected_ids.len() {
            return Err(Error::InvalidManifest(format!(
                "{} gains for {} ids",
                self.gains.len(),
                self.selected_ids.len()
            )));
        }
        Ok(())
    }
}

pub fn save_manifest(manifest: &SelectionManifest, path: impl AsRef<Path>) -> Result<()> {
    manifest.validate()?;
    let path = path.as_ref();
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest always serializes");
    json.push('\n');
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<SelectionManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: SelectionManifest =
        serde_json::from_str(&text).map_err(|e| Error::InvalidManifest(e.to_string()))?;
    m.validate()?;
    Ok(m)
}

/// Timestamp for new manifests: `SOURCE_DATE_EPOCH` when set, so that
/// repeated runs can produce byte-identical output, otherwise the clock.
pub fn manifest_timestamp() -> DateTime<Utc> {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| Utc.timestamp_opt(secs, 0).single())
        .unwrap_or_else(Utc::now)
}

mod nullable_f64s {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| x.is_finite().then_some(*x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|x| x.unwrap_or(f64::NEG_INFINITY))
            .collect())
    }
}
