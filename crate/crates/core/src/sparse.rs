//! Joint word + entity term space and sparse vectors over it.
//!
//! Word pieces occupy term ids `[0, |V|)`, entities `[|V|, |V| + |E|)`.
//! Weights are stored as `f32`; every score is accumulated in `f64` in
//! ascending term-id order, word range first, then entity range, then the two
//! partial sums are added. Index search and the compact batch scorer follow
//! the same order, so all three produce bit-identical scores.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TermId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VocabularyLayout {
    pub word_vocab_size: u32,
    pub entity_count: u32,
}

impl VocabularyLayout {
    pub fn new(word_vocab_size: u32, entity_count: u32) -> Result<Self> {
        if word_vocab_size == 0 {
            return Err(Error::InvalidArgument(
                "word vocabulary must be non-empty".into(),
            ));
        }
        if word_vocab_size.checked_add(entity_count).is_none() {
            return Err(Error::InvalidArgument(
                "layout exceeds the 32-bit term space".into(),
            ));
        }
        Ok(Self {
            word_vocab_size,
            entity_count,
        })
    }

    pub fn entity_offset(&self) -> TermId {
        self.word_vocab_size
    }

    pub fn dimension(&self) -> u64 {
        self.word_vocab_size as u64 + self.entity_count as u64
    }

    pub fn is_valid(&self, term: TermId) -> bool {
        (term as u64) < self.dimension()
    }

    pub fn is_entity(&self, term: TermId) -> bool {
        term >= self.entity_offset()
    }

    pub fn entity_term(&self, slot: u32) -> Option<TermId> {
        (slot < self.entity_count).then(|| self.entity_offset() + slot)
    }

    pub(crate) fn check(&self, term: TermId) -> Result<()> {
        if self.is_valid(term) {
            Ok(())
        } else {
            Err(Error::TermOutOfRange {
                term,
                word_vocab_size: self.word_vocab_size,
                entity_count: self.entity_count,
            })
        }
    }
}

/// Weighted bag of terms. Entries are sorted by term id and every stored
/// weight is finite and strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    layout: VocabularyLayout,
    entries: Vec<(TermId, f32)>,
}

impl SparseVector {
    pub fn empty(layout: VocabularyLayout) -> Self {
        Self {
            layout,
            entries: Vec::new(),
        }
    }

    /// Builds a vector from arbitrary-order entries. Zero weights are dropped;
    /// negative or non-finite weights, duplicate ids and out-of-layout ids are
    /// errors.
    pub fn from_entries(
        layout: VocabularyLayout,
        entries: impl IntoIterator<Item = (TermId, f32)>,
    ) -> Result<Self> {
        let mut out = Vec::new();
        for (term, weight) in entries {
            layout.check(term)?;
            if !weight.is_finite() || weight < 0.0 {
                return Err(Error::InvalidWeight {
                    term,
                    weight: weight as f64,
                });
            }
            if weight > 0.0 {
                out.push((term, weight));
            }
        }
        out.sort_unstable_by_key(|&(t, _)| t);
        if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateTerm(w[0].0));
        }
        Ok(Self {
            layout,
            entries: out,
        })
    }

    pub fn layout(&self) -> VocabularyLayout {
        self.layout
    }

    pub fn entries(&self) -> &[(TermId, f32)] {
        &self.entries
    }

    pub fn get(&self, term: TermId) -> Option<f32> {
        self.entries
            .binary_search_by_key(&term, |&(t, _)| t)
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Index of the first entity-range entry.
    fn boundary(&self) -> usize {
        let offset = self.layout.entity_offset();
        self.entries.partition_point(|&(t, _)| t < offset)
    }

    pub fn word_entries(&self) -> &[(TermId, f32)] {
        &self.entries[..self.boundary()]
    }

    pub fn entity_entries(&self) -> &[(TermId, f32)] {
        &self.entries[self.boundary()..]
    }
}

/// Sequential merge-join of two sorted entry slices, accumulated in `f64`.
pub(crate) fn merge_dot(a: &[(TermId, f32)], b: &[(TermId, f32)]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut acc = 0.0f64;
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 as f64 * b[j].1 as f64;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

fn same_layout(a: &SparseVector, b: &SparseVector) -> Result<()> {
    if a.layout != b.layout {
        return Err(Error::LayoutMismatch(format!(
            "{:?} vs {:?}",
            a.layout, b.layout
        )));
    }
    Ok(())
}

/// Relevance score: word-range dot plus entity-range dot.
pub fn dot(a: &SparseVector, b: &SparseVector) -> Result<f64> {
    same_layout(a, b)?;
    let words = merge_dot(a.word_entries(), b.word_entries());
    let entities = merge_dot(a.entity_entries(), b.entity_entries());
    Ok(words + entities)
}

pub fn split(v: &SparseVector) -> (SparseVector, SparseVector) {
    let word = SparseVector {
        layout: v.layout,
        entries: v.word_entries().to_vec(),
    };
    let entity = SparseVector {
        layout: v.layout,
        entries: v.entity_entries().to_vec(),
    };
    (word, entity)
}

/// Union of two vectors with disjoint supports.
pub fn merge(a: &SparseVector, b: &SparseVector) -> Result<SparseVector> {
    same_layout(a, b)?;
    SparseVector::from_entries(a.layout, a.entries.iter().chain(&b.entries).copied())
}

pub fn l0(v: &SparseVector) -> usize {
    v.entries.len()
}

pub fn l1(v: &SparseVector) -> f64 {
    v.entries.iter().map(|&(_, w)| w as f64).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
struct SparseRecord {
    id: String,
    vector: BTreeMap<String, f32>,
}

/// Reads line-delimited `{"id": ..., "vector": {"<term_id>": weight}}` records.
pub fn read_sparse_jsonl<R: BufRead>(
    reader: R,
    layout: VocabularyLayout,
    source: &str,
) -> Result<Vec<(String, SparseVector)>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::malformed(source, n + 1, m);
        let rec: SparseRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let mut entries = Vec::with_capacity(rec.vector.len());
        for (k, w) in rec.vector {
            let term: TermId = k
                .parse()
                .map_err(|_| bad(format!("term id {k:?} is not a u32")))?;
            entries.push((term, w));
        }
        let v = SparseVector::from_entries(layout, entries).map_err(|e| bad(e.to_string()))?;
        out.push((rec.id, v));
    }
    Ok(out)
}

/// Writes one JSON record per vector, terms in ascending numeric order.
/// `f32` weights are printed in their shortest round-trip form.
pub fn write_sparse_jsonl<'a, W: Write>(
    mut w: W,
    records: impl IntoIterator<Item = (&'a str, &'a SparseVector)>,
) -> Result<()> {
    for (id, v) in records {
        let mut line = String::from("{\"id\":");
        line.push_str(&serde_json::to_string(id)?);
        line.push_str(",\"vector\":{");
        for (i, &(t, x)) in v.entries.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push('"');
            line.push_str(&t.to_string());
            line.push_str("\":");
            line.push_str(&serde_json::to_string(&x)?);
        }
        line.push_str("}}\n");
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}
