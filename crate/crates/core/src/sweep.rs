//! Trade-off sweeps: one selection per lambda, summarised as CSV rows.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pool_io::{CandidatePool, Method};
use crate::scoring::ScoreVector;
use crate::select::{select, SelectParams};

/// The trade-off values commonly swept.
pub const DEFAULT_LAMBDAS: [f64; 8] = [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub method: Method,
    pub mean_selected_r: f64,
    pub mean_pairwise_similarity: Option<f64>,
    pub cumulative_logdet: Option<f64>,
    pub wall_time_ms: Option<f64>,
}

/// Mean cosine similarity over all unordered pairs; `None` below two items.
pub fn mean_pairwise_similarity(pool: &CandidatePool, indices: &[usize]) -> Result<Option<f64>> {
    if indices.len() < 2 {
        return Ok(None);
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in indices.iter().enumerate() {
        let ei = pool.embedding(i)?;
        for &j in &indices[a + 1..] {
            sum += ei.iter().zip(pool.embedding(j)?).map(|(x, y)| x * y).sum::<f64>();
            pairs += 1;
        }
    }
    Ok(Some(sum / pairs as f64))
}

/// Runs `lm_dpp` at every lambda; lambda 0 and 1 route to the vanilla DPP
/// and perplexity top-M respectively.
pub fn run_sweep(
    pool: &CandidatePool,
    scores: &ScoreVector,
    lambdas: &[f64],
    base: &SelectParams,
) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::LambdaRange(bad));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let params = SelectParams {
                method: Method::LmDpp,
                lambda,
                ..base.clone()
            };
            let out = select(pool, Some(scores), &params)?;
            let n = out.indices.len() as f64;
            Ok(SweepRow {
                lambda,
                method: out.manifest.method,
                mean_selected_r: out.indices.iter().map(|&i| scores.values[i]).sum::<f64>() / n,
                mean_pairwise_similarity: mean_pairwise_similarity(pool, &out.indices)?,
                cumulative_logdet: out.manifest.cumulative_logdet,
                wall_time_ms: Some(out.wall_time.as_secs_f64() * 1e3),
            })
        })
        .collect()
}

/// Writes the report. With `timing = false` the wall-time column is left
/// empty so that repeated runs produce identical bytes.
pub fn write_csv<W: Write>(rows: &[SweepRow], out: W, timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        let row = SweepRow {
            wall_time_ms: if timing { row.wall_time_ms } else { None },
            ..row.clone()
        };
        w.serialize(row)
            .map_err(|e| Error::InvalidParam(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<sweep output>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool_io::{normalize_pool, CandidateItem};

    #[test]
    fn one_row_per_lambda_and_provenance() {
        let items = (0..40)
            .map(|i| {
                let a = i as f64 * 0.37;
                CandidateItem::new(format!("s{i}"), "t").with_embedding(vec![a.cos(), a.sin(), (a * 1.7).sin()])
            })
            .collect();
        let pool = normalize_pool(CandidatePool::new(items).unwrap()).unwrap();
        let scores = ScoreVector::raw((0..40).map(|i| ((i * 13) % 17) as f64 / 17.0).collect());
        let base = SelectParams {
            budget: 6,
            ..SelectParams::default()
        };
        let rows = run_sweep(&pool, &scores, &DEFAULT_LAMBDAS, &base).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].method, Method::VanillaDpp);
        assert_eq!(rows[4].method, Method::LmDpp);
        assert_eq!(rows[7].method, Method::PerplexityTopk);
        assert_eq!(rows.iter().map(|r| r.lambda).collect::<Vec<_>>(), DEFAULT_LAMBDAS);

        let mut buf = Vec::new();
        write_csv(&rows, &mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "lambda,method,mean_selected_r,mean_pairwise_similarity,cumulative_logdet,wall_time_ms"
        );
        assert!(lines.next().unwrap().starts_with("0.0,vanilla_dpp,"));
        assert_eq!(text.lines().count(), 9);
        assert!(run_sweep(&pool, &scores, &[1.5], &base).is_err());
    }
}
