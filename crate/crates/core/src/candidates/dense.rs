use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::head::CandidateSet;
use crate::kb::{EmbeddingTable, EntityId};

/// Exact top-`k` by dot product over every row of `emb`, ties by ascending id.
pub fn dense_retrieve(query_vec: &[f32], emb: &EmbeddingTable, k: usize) -> Result<CandidateSet> {
    if query_vec.len() != emb.dim() {
        return Err(Error::Dimension {
            context: "dense query vector",
            expected: emb.dim(),
            actual: query_vec.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut scored: Vec<(f64, EntityId)> = emb
        .ids()
        .iter()
        .map(|&id| {
            let row = emb.row(id).expect("listed id has a row");
            let s: f64 = row
                .iter()
                .zip(query_vec)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            (s, id)
        })
        .collect();
    let cmp = |a: &(f64, EntityId), b: &(f64, EntityId)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    CandidateSet::new(scored.into_iter().map(|(_, id)| id).collect())
}

#[derive(Deserialize)]
struct DenseQuery {
    id: String,
    vector: Vec<f32>,
}

/// Reads `{"id": ..., "vector": [f32, ...]}` lines.
pub fn read_dense_queries(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<f32>)>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: DenseQuery = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(path.display(), n + 1, e.to_string()))?;
        out.push((q.id, q.vector));
    }
    Ok(out)
}
