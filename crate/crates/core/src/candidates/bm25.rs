use std::collections::HashMap;

use crate::head::CandidateSet;
use crate::kb::{EntityId, KnowledgeBase};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// BM25 index over entity descriptions.
#[derive(Debug, Clone)]
pub struct Bm25EntityIndex {
    postings: HashMap<String, Vec<(EntityId, u32)>>,
    doc_lengths: HashMap<EntityId, u32>,
    avg_len: f64,
    n: usize,
    params: Bm25Params,
}

impl Bm25EntityIndex {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_length(&self, id: EntityId) -> Option<u32> {
        self.doc_lengths.get(&id).copied()
    }

    pub fn doc_freq(&self, token: &str) -> usize {
        self.postings.get(token).map_or(0, Vec::len)
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.doc_freq(token) as f64;
        (1.0 + (self.n as f64 - df + 0.5) / (df + 0.5)).ln()
    }

    fn tf_part(&self, tf: u32, len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = if self.avg_len > 0.0 {
            len as f64 / self.avg_len
        } else {
            0.0
        };
        tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm))
    }
}

pub fn bm25_build(kb: &KnowledgeBase) -> Bm25EntityIndex {
    bm25_build_with(kb, Bm25Params::default())
}

pub fn bm25_build_with(kb: &KnowledgeBase, params: Bm25Params) -> Bm25EntityIndex {
    let mut postings: HashMap<String, Vec<(EntityId, u32)>> = HashMap::new();
    let mut doc_lengths = HashMap::with_capacity(kb.len());
    let mut total = 0u64;
    for e in kb.entities() {
        let tokens = tokenize(&e.description);
        total += tokens.len() as u64;
        doc_lengths.insert(e.entity_id, tokens.len() as u32);
        let mut tf: HashMap<String, u32> = HashMap::new();
        for t in tokens {
            *tf.entry(t).or_default() += 1;
        }
        for (t, c) in tf {
            postings.entry(t).or_default().push((e.entity_id, c));
        }
    }
    let n = kb.len();
    Bm25EntityIndex {
        postings,
        doc_lengths,
        avg_len: if n == 0 { 0.0 } else { total as f64 / n as f64 },
        n,
        params,
    }
}

/// Top-`k` entities by BM25 of the query against their descriptions,
/// ties by ascending entity id. Every query token occurrence contributes.
pub fn bm25_retrieve(idx: &Bm25EntityIndex, query_text: &str, k: usize) -> CandidateSet {
    CandidateSet::dedup_from(
        bm25_scores(idx, query_text, k)
            .into_iter()
            .map(|(id, _)| id),
    )
}

pub fn bm25_scores(idx: &Bm25EntityIndex, query_text: &str, k: usize) -> Vec<(EntityId, f64)> {
    let mut acc: HashMap<EntityId, f64> = HashMap::new();
    for token in tokenize(query_text) {
        let Some(list) = idx.postings.get(&token) else {
            continue;
        };
        let idf = idx.idf(&token);
        for &(id, tf) in list {
            let len = idx.doc_lengths[&id];
            *acc.entry(id).or_insert(0.0) += idf * idx.tf_part(tf, len);
        }
    }
    let mut ranked: Vec<(EntityId, f64)> = acc.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}
